//! Optimal control of Goursat-Darboux systems
//! `x_st = f(s, t, x, x_s, x_t, u)` on regions under a non-increasing
//! boundary curve.
//!
//! Modules, bottom-up: [`geometry`] (domain, grid, quadrature, zones),
//! [`problem`] (dynamics and cost), [`forward`] (state solver and the generic
//! Picard engine), [`riemann`] (Riemann function families), [`adjoint`]
//! (co-state sweep and its quadrature oracle), [`optimize`] (cost, gradient,
//! projected gradient, extremum checks) and [`tsunami`] (the inverse problem
//! for a long-wave basin model).

pub mod adjoint;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod numeric;
pub mod optimize;
pub mod problem;
pub mod riemann;
pub mod tsunami;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
