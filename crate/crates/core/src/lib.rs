//! Hidden Markov models whose transition probabilities and observation
//! parameters depend on covariates through linear predictors with penalized
//! splines and random effects. Smoothness and variance parameters are
//! estimated by maximizing a Laplace-approximated marginal likelihood.

pub mod cli;
pub mod data;
pub mod design;
pub mod dists;
pub mod error;
pub mod forward;
pub mod hidden;
pub mod inference;
pub mod laplace;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod simulate;
pub mod specfile;
pub mod suggest;
pub mod util;

pub use error::{Error, Result};
