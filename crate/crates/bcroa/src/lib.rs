//! Barrier-certified region-of-attraction estimation for dynamical systems
//! that are only partially known.
//!
//! The pipeline: polynomialize the known non-polynomial part of the vector
//! field with Chebyshev interpolants, learn the remaining discrepancy from
//! trajectory data with a Gaussian process whose mean is polynomial, then
//! certify and iteratively enlarge an invariant region with sum-of-squares
//! programs solved by the built-in semidefinite solver.

pub mod cheb;
pub mod exprlang;
pub mod gp;
pub mod poly;
pub mod roa;
pub mod sdp;
pub mod sim;
pub mod sos;
