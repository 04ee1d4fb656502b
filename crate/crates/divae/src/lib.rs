//! Density-informed VAE laboratory.
//!
//! Trains VAEs whose latent log-prior probabilities are aligned to externally
//! estimated data-space log-densities, via a direct and a flow-corrected
//! regularizer, and evaluates alignment, coverage, and OOD calibration.
//!
//! Layout:
//! - [`autodiff`]: reverse-mode tape engine and Adam.
//! - [`synthgen`]: 2D-GMM-plus-filler synthetic datasets with closed-form
//!   oracle densities.
//! - [`density`]: PCA projection and the external log-density teachers
//!   (oracle passthrough, KDE, adaptive kNN).
//! - [`vae`]: encoder/decoder MLPs, the three priors, and the ELBO.
//! - [`flow`]: affine coupling stack with exact log-det Jacobians.
//! - [`align`]: Huber-based precision-weighted alignment losses and the
//!   total training objective.
//! - [`metrics`]: KS, Wasserstein-1, coverage KL, posterior diagnostics.
//! - [`io`]: IDX ingestion and the DIVD/DIVR/DIVM binary artifacts.
//! - [`config`]: flat keyed experiment configuration with presets.
//! - [`train`] and [`experiment`]: training loop and protocol orchestration.

pub mod align;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod tensor;

pub mod config;
pub mod density;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod vae;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
