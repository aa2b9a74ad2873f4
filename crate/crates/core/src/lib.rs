//! Scan-adaptive k-space line selection for multi-coil MRI.

pub mod cimage;
pub mod encoding;
pub mod error;
pub mod export;
pub mod fft;
pub mod icd;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod recon;
pub mod sampler;
pub mod synth;
pub mod training;

pub use cimage::{CImage, RealImage};
pub use encoding::{Encoder, MaskedAdjointOp, MultiCoilKSpace, NormalOp, SensMaps};
pub use error::{Error, Result};
pub use mask::SamplingMask;
