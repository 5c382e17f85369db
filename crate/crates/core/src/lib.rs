//! Simulation and numerical verification of spatial self-similar
//! growth-fragmentations and of Brownian half-space excursions sliced by
//! hyperplanes.

// `!(x > 0.0)` is used on purpose so that NaN fails parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridges;
pub mod crossing;
pub mod cumulant;
pub mod error;
pub mod excursion;
pub mod gfengine;
pub mod halfspace;
pub mod quadrature;
pub mod randkit;
pub mod stats;

pub use error::{Error, Result};
