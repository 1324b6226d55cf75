//! Video anomaly detection with a masked transformer autoencoder.
//!
//! The model predicts the next frame from a short window of past frames.
//! During training, random patch embeddings are replaced by a learned mask
//! token to synthesize pseudo anomalies from normal data, and the encoder is
//! pushed to produce consistent features for a window and its masked twin.
//! At test time frames are scored by prediction PSNR and evaluated with
//! frame-level AUROC.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod model;
pub mod scoring;
pub mod seeds;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
