//! Oracles shared by several test targets.
#![allow(dead_code)]

pub mod gradients;
pub mod losses;
pub mod metrics;
