//! Sparse multidimensional graded-response item response theory.
//!
//! Items are factorized into latent dimensions inside the IRT model through
//! horseshoe shrinkage on the discriminations. Calibration runs mean-field
//! ADVI on a scalar reverse-mode tape, dimensionality is compared with WAIC,
//! and a small feed-forward encoder is trained afterwards to score new
//! respondents against the calibrated decoder.

pub mod diff;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod advi;
pub mod commands;
pub mod factor;
pub mod grm;
pub mod io;
pub mod sim;

pub use error::{IrtError, Result};
