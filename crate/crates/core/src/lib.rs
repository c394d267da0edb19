//! Kronecker-factored approximate curvature (K-FAC) for feed-forward networks.
//!
//! This crate implements approximate natural-gradient optimization built on a
//! layer-wise Kronecker factorization of the Fisher information matrix. The
//! inverse of the factored approximation is itself approximated with one of
//! two structures, block-diagonal or block-tridiagonal, both of which admit
//! cheap exact matrix-vector products.
//!
//! The crate is split into five layers:
//!
//! - [`net`]: dense feed-forward networks in homogeneous coordinates, with
//!   forward/backward passes, predictive-distribution target sampling, and the
//!   invertible layer-wise reparameterization used by the invariance tests.
//! - [`fisher`]: matrix-free products with the exact Fisher, the quadratic
//!   model built on it, and dense assembly for small problems.
//! - [`stats`]: estimation of the Kronecker factor second moments from
//!   mini-batches, with exponentially decayed running averages.
//! - [`kron`]: the structured linear algebra — factored Tikhonov damping,
//!   block-diagonal and block-tridiagonal inverse application, and the
//!   eigendecomposition-based solver for `A⊗B ± C⊗D` systems.
//! - [`engine`]: the optimizer itself — update proposal, exact-Fisher
//!   rescaling, momentum, and the damping/refresh schedules.
//!
//! Everything is `f64` and deterministic given a seed. The crate is `no_std`
//! (with `alloc`); all I/O lives in the companion benchmark crate.

#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod engine;
pub mod error;
pub mod fisher;
pub mod kron;
mod math;
pub mod net;
pub mod rng;
pub mod stats;

pub use error::{CoreError, Result};
