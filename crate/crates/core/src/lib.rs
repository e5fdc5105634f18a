//! Wavelet/Fourier low-light image enhancement.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`graph`], [`gradcheck`], [`checkpoint`]: a small
//!   dense-tensor substrate with a reverse-mode tape and a finite-difference
//!   gradient verifier.
//! * [`wavelet`] and [`fourier`]: the Haar transform and the polar FFT.
//! * [`ssm`]: zero-order-hold discretization and the (selective) scan.
//! * [`blocks`]: the wavelet Mamba block and the Fourier adjustment block.
//! * [`model`], [`train`]: the encoder/latent/decoder network, its losses and
//!   the Adam training step.
//! * [`metrics`]: PSNR and SSIM.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{FeatureMap, Gradients, Param, ParamStore};
