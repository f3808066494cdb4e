//! Numerical laboratory for hypoelliptic stochastic evolution equations
//! under Galerkin truncation.
//!
//! The crate simulates `dX = (AX + α(X)) dt + σ(X) dW` in mild form, its
//! first-variation flow `Y_t` and right inverse `Z_t`, the Malliavin
//! derivative `D_r X_t` by two routes, the covariance `C_t` and Malliavin
//! matrix `γ_t` of a projection `F X_t`, the Lie brackets entering the
//! bracket-rank condition, and Monte Carlo diagnostics for the law of
//! `F X_T`.
//!
//! The crate is `no_std` and needs only `alloc`. With the default
//! `parallel` feature, path-level Monte Carlo loops run on rayon.

#![no_std]

extern crate alloc;

pub mod density;
pub mod error;
pub mod expm;
pub mod fd;
pub mod lie;
pub mod malliavin;
pub mod models;
pub mod par;
pub mod sde_solver;
pub mod spaces;
pub mod variation_flow;

pub use error::{Error, Result};
pub use models::{zoo, ModelSpec, VectorField};
pub use spaces::{Semigroup, TimeGrid, TruncationConfig};
