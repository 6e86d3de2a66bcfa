//! Tiny single-class anchor detector whose feature space is shaped by a
//! clustering-guided contrastive loss anchored on clean font-library exemplars.

pub mod error;
pub mod geometry;
pub mod netcore;
pub mod roipool;
pub mod clustering;
pub mod lossfns;
pub mod dataset;
mod seeding;
pub mod trainer;
pub mod evalkit;
pub mod cli;

pub use error::{Error, Result};
