//! Bayesian optimization of expensive high-dimensional black-box functions
//! through a sequence of low-dimensional linear subspaces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod doe;
pub mod error;
pub mod gp;
pub mod embeddings;
mod optim;
pub mod subspace;
pub mod problems;
pub mod cbo;
pub mod history;
pub mod optimizer;

pub use doe::Doe;
pub use error::{EgorseError, Result};
pub use gp::{fit_gp, log_marginal_likelihood, GpFitConfig, GpModel, Hyperparams};
pub use history::{best_point, History};
pub use optimizer::{run_egorse, EgorseConfig};
