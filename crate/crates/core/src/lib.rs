//! Joint selection of a sparse, L1-normalized asset portfolio and its
//! Ornstein-Uhlenbeck parameters by penalized maximum likelihood.
//!
//! The solver eliminates the OU mean, lag coefficient and (for γ = 0)
//! innovation variance in closed form and runs projected gradient on the
//! remaining weights over the L1 unit sphere.

pub mod cli;
pub mod data_io;
pub mod error;
pub mod likelihood;
pub mod ou_model;
pub mod projection;
pub mod solver;

pub use data_io::{PriceMatrix, SplitSpec};
pub use error::{Error, Result};
pub use likelihood::{NllConvention, PenaltyConfig, Weights};
pub use ou_model::{ARParams, OUParams, Series, TimeGrid};
pub use solver::{FitResult, SolverConfig};
