//! Risk prediction for high-dimensional (kernel) ridge regression.
//!
//! GCV and the spectrum-only and norm baselines work from a Gram matrix and
//! labels alone. The omniscient estimate and the effective regularization κ
//! need the population spectrum and alignment, available for synthetic
//! instances. The scaling module turns a sequence of sample sizes into
//! eigendecay, alignment and rate exponents.

pub mod error;
pub mod experiment;
pub mod io;
pub mod predictors;
pub mod ridge_path;
pub mod rmt;
pub mod scaling;
pub mod spectral;
pub mod synthesis;

pub use error::{Error, Result};
