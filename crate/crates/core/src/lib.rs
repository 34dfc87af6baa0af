//! Stability certificates for linear systems whose delay is distributed
//! (gamma kernel in continuous time, Poisson weights in discrete time).

pub mod error;
pub mod linalg;
pub mod sdp;

pub use error::{Error, Result};
pub use linalg::{Matrix, SymMatrix};
pub use sdp::{FeasibilityProblem, FeasibilityResult, SolveOptions, Status};
pub mod gamma;
pub mod quad;
pub mod poisson;
pub mod spectral;
pub mod ineq;
pub mod sim;
