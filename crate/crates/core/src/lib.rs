//! Minimizers of the constrained aggregation energy
//! `E[rho] = 1/2 int int rho(x) (|x-y|^-beta + |x-y|^alpha) rho(y)` over
//! densities `0 <= rho <= 1` of fixed mass in three dimensions.
//!
//! The crate computes stationary points with a Frank-Wolfe method driven by
//! the bathtub linear oracle, classifies them into liquid, intermediate and
//! solid phases, and checks the Euler-Lagrange conditions and scaling laws
//! that such minimizers obey.

pub mod analysis;
pub mod config;
pub mod driver;
pub mod error;
pub mod fields;
pub mod kernels;
pub mod optimizer;
pub mod potential;
pub mod verify;

pub use error::{Error, Result};
