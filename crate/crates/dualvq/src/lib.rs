//! Dual-codebook VQ-VAE for speaker/content separation, plus the two
//! downstream evaluations (code-based diarization, code-sequence phone
//! recognition) on a synthetic corpus with exact ground truth.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod model;
pub mod numerics;
pub mod report;
pub mod tasks;
pub mod training;
pub mod vq;
pub mod wav;
