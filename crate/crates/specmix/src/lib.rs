//! Blind hyperspectral unmixing engine.
//!
//! A 1-D spectral convolution encoder maps each pixel spectrum to a latent
//! feature, a multinomial mixture kernel turns the feature into simplex-valued
//! material abundances, and a reconstruction head mixes fixed endmember
//! spectra with trainable residual and uncertainty terms. Training combines a
//! spectral-angle reconstruction loss with a gradient-penalty Wasserstein
//! critic, all on a self-contained reverse-mode autodiff core.

pub mod autodiff;
pub mod critic;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixture;
pub mod model;
pub mod optim;
pub mod train;
pub mod params;

pub use error::{Error, Result};
