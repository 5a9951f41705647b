//! Phase-consistent domain adaptation for semantic segmentation at desk scale.
//!
//! The crate covers the full pipeline: a small reverse-mode autodiff engine,
//! Fourier phase analysis, translator/discriminator/segmentation/prior
//! networks, the losses that tie them together, a synthetic two-domain
//! benchmark, segmentation metrics, and the training orchestration.

pub mod autodiff;
pub mod cpn;
pub mod gradsuite;
pub mod image;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod spectral;
pub mod synthdata;
pub mod trainer;
