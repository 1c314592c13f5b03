//! Weighted-L² residual losses for the BGK kinetic model.

pub mod ansatz;
pub mod autodiff;
pub mod counterexamples;
pub mod error;
pub mod maxwellian;
pub mod reference_solver;
pub mod residuals_loss;
pub mod trainer;
pub mod velocity_grid;
pub mod weights;

pub use error::{BgkError, Result};
