//! Adversarial training for first-stage neural retrieval at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, two toy
//! bi-encoders (dense mean-pooling and a SPLADE-style sparse encoder),
//! contrastive and distillation ranking losses, embedding-space adversarial
//! perturbations (FGSM, universal, random), query-variation generators, and
//! exhaustive-ranking evaluation with paired significance tests.

pub mod adversarial;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod variations;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
