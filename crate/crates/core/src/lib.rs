//! Potential smoothing of point-sampled stocks onto latitude/longitude rasters.
//!
//! A stock `S_a` observed at point `g_a` spreads over its neighborhood through a
//! normalized distance-decay kernel `f`; the potential at `M` is
//! `Φ(M) = Σ_a S_a · f(d(g_a, M))` with `d` the great-circle distance. Kernels
//! integrate to one over the plane, so the integral of `Φ` equals the total
//! stock, and they are parameterized by their mean range (portée) in km.

pub mod catalog;
pub mod engine;
pub mod error;
pub mod geodesy;
pub mod kernels;
pub mod quadrature;
pub mod request;
pub mod spatial_index;
pub mod synthetic;
pub mod wire;

pub use error::{Error, Result};
