//! Cross-subject decoding of LFP recordings by data centering: sequence-space
//! features, per-target moment matching between subjects, and LDA decoding.

pub mod centering;
pub mod dataset;
pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod imbalance;
pub mod moments;
pub mod rng;
pub mod runner;
pub mod trial_file;

pub use error::{Error, Result};
