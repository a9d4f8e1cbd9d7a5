//! Desk-scale image relighting: a toy latent-denoising pipeline with a
//! position-guided light adapter, spectral low-frequency enhancement of
//! background features, and a wavelet-domain foreground fixer, plus the
//! synthetic data, metrics and ablation tooling around them.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixer;
pub mod image;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod pnm;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{FeatureGrid, ImageBuffer, Mask};
pub use tensor::Tensor;
