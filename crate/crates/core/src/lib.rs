//! Unsupervised correlation analysis: linear projections of two unpaired
//! data views into a shared low-dimensional space, trained adversarially,
//! with consensus selection of the best run among many and supervised CCA
//! baselines for calibration.

#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod artifact;
pub mod audit;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod selection;
pub mod trainer;

pub use error::{Result, UcaError};
pub use matrix::Matrix;
pub use rng::RngStream;
