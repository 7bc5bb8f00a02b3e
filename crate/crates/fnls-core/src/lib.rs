//! Numerical laboratory for the fractional cubic Schrödinger equation on the torus:
//! Gibbs sampling, the truncated gauged flow, second-Picard-iterate scaling, and
//! brute-force counting, tensor and random-averaging-operator diagnostics.

pub mod counting;
pub mod dynamics;
pub mod error;
pub mod gibbs;
pub mod harness;
pub mod io;
pub mod picard;
pub mod rao;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
