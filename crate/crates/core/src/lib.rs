//! Two-stream decoder network (TSDN) for reconstruction-based anomaly
//! detection.
//!
//! The pipeline: superpixel random filling ([`surf`]) corrupts normal
//! training images; a shared encoder feeds an abnormality decoder that
//! predicts the corruption mask and a normality decoder that reconstructs
//! the clean image from a channel-gated latent ([`network`]). Training
//! combines reconstruction, SSIM, GMS, mask and gate losses ([`training`]);
//! anomaly maps come from the blurred reconstruction error ([`scoring`]).

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod imgproc;
pub mod network;
pub mod par;
pub mod scoring;
pub mod slic;
pub mod surf;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
