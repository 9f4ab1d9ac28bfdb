//! Numerical engine for Sobolev calculus with weighted Gaussian measures.
//!
//! The crate studies, on finite-dimensional truncations, the calculus of a
//! Gaussian measure `mu` reweighted by a density `w >= 0`: the measure
//! `nu = w * mu`, gradients along the covariance-weighted directions,
//! divergence operators adjoint to those gradients, Gaussian surface
//! measures on level sets, and the boundary trace identities that tie them
//! together. Every identity the engine knows is checked two ways —
//! deterministic tensor quadrature where the dimension allows it and seeded
//! Monte Carlo everywhere — with explicit error bars and tolerances.
//!
//! Everything runs in *whitened coordinates* (see [`model`]): the reference
//! Gaussian is `N(0, I_n)`, covariance information enters only through
//! explicit scalings, and directional calculus is ordinary calculus.

pub mod checks;
pub mod config;
pub mod divergence;
pub mod error;
pub mod field;
pub mod integrate;
pub mod model;
pub mod quad;
pub mod report;
pub mod surface;
pub mod trace;
pub mod weight;

pub use error::{EngineError, Result};

// The guide's code blocks compile and run as doc-tests, so the book under
// `book/` can never drift from the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/integration.md")]
    mod integration {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/divergence.md")]
    mod divergence {}
    #[doc = include_str!("../../../book/src/surfaces.md")]
    mod surfaces {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/checks-cli.md")]
    mod checks_cli {}
}
