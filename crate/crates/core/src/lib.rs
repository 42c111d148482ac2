//! Numerical laboratory for periodic homogenization of local and non-local
//! integral functionals.
//!
//! * [`lattice`]: grids, periodic folding, midpoint quadrature, field containers.
//! * [`integrands`]: local densities `f(y, ξ)`, non-local densities `W`, audits and
//!   convex envelopes in the state variable.
//! * [`cellhom`]: the homogenized density from the periodic cell formula.
//! * [`ymeasure`]: atomic two-scale Young measures, their constructions and the
//!   characterization checker.
//! * [`osclab`]: oscillating sequences and empirical pairing tests.
//! * [`nonlocal`]: the oscillating double-integral functional, its measure-valued
//!   limit and Γ-convergence experiments.

pub mod cellhom;
pub mod error;
pub mod integrands;
pub mod lattice;
pub mod nonlocal;
pub mod numerics;
pub mod osclab;
pub mod ymeasure;

pub use error::{Error, Result};
