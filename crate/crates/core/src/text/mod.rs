//! Vocabulary, corpora, synthetic data and triplet batches.

pub mod batch;
pub mod corpus;
pub mod lexical;
pub mod synth;
pub mod vocab;

pub use batch::{BatchSampler, NegativeSource, Padded, TeacherMargins, TripletBatch};
pub use corpus::{load_corpus, write_corpus, Corpus, CorpusPaths, Qrels};
pub use lexical::{mine_hard_negatives, overlap, LexicalIndex};
pub use synth::{generate_synthetic, SynthCorpus, SynthSpec};
pub use vocab::{Vocabulary, PAD, UNK};
