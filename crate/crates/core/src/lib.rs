//! Non-parametric estimation of simplified and non-simplified vine copulas
//! with penalized hierarchical B-splines.

pub mod basis;
pub mod cli;
pub mod condreduce;
pub mod copula;
pub mod dgp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optimize;
pub mod penalty;
pub mod satest;
pub mod vine;

pub use error::{Error, Result};
