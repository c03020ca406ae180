//! Video prediction with factorized content and pose codes.
//!
//! Modules follow the pipeline: [`synthvid`] generates clips with known
//! factors, [`nets`] builds the encoders/decoder/critic/predictor,
//! [`objectives`] holds every loss term, [`trainer`] runs both training phases,
//! [`miest`] scores disentanglement, and [`evalkit`] measures frame quality.

pub mod error;
pub mod evalkit;
pub mod nets;
pub mod miest;
pub mod objectives;
pub mod synthvid;
pub mod trainer;

pub use error::{MipaeError, Result};
pub use mipae_tensor::exec;
