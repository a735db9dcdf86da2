//! Video anomaly detection by multi-path recurrent frame prediction.
//!
//! A network trained on normal footage predicts every frame from the `P`
//! frames before it; frames it predicts poorly (low PSNR) get high anomaly
//! scores. See the README for the command-line workflow.

pub mod archive;
pub mod autograd;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
