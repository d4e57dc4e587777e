//! Discrete-time stochastic linear-quadratic optimal control.
//!
//! The crate solves the finite- and infinite-horizon problem for
//! `X(k+1) = A X(k) + B U(k) + W(k)` with Gaussian noise, builds the optimal
//! stationary pair `(Xˢ, Uˢ = K Xˢ)`, constructs a strict dissipativity
//! certificate for it and checks turnpike bounds on exact moments and on
//! Monte Carlo paths that share a noise realization with the stationary pair.

pub mod dissipativity;
pub mod error;
pub mod matrix;
pub mod model;
pub mod riccati;
pub mod simulate;
pub mod stationary;
pub mod turnpike;

pub use error::{Error, Result};
pub use matrix::{Matrix, SymMatrix};
pub use model::{AffineControl, GaussianState, LtiStochasticSystem, Perturbation, Problem, QuadraticCost, Schedule};
pub use riccati::{GainSchedule, RiccatiSolution};
pub use stationary::{MomentTrajectory, NoiseCoupling, StationaryPair};
