//! Numerical evaluation of equivariant trace formulas for flows on covers of
//! compact manifolds, with independent quadrature and covering-space checks.

pub mod config;
pub mod error;
pub mod expr;
pub mod flow;
pub mod geometry;
pub mod ode;
pub mod oracle;
pub mod orbits;
pub mod quad;
pub mod run;
pub mod trace;

pub use error::{Error, Result};
