//! Online regularized weighted-least-squares state estimation for time-varying
//! linear measurement models, with the accompanying error-bound analysis and a
//! seeded Monte Carlo harness.
//!
//! The estimator step is
//!
//! ```text
//! x̂(t) = argmin_w (ỹ − A w)ᵀ Q⁻¹ (ỹ − A w) + γ ‖w − x̂(t−1)‖²
//!      = Λ x̂(t−1) + (1/γ) Λ Aᵀ Q⁻¹ ỹ,      Λ = γ (AᵀQ⁻¹A + γI)⁻¹
//! ```
//!
//! with `ỹ = y − b` for an affine offset `b`.

pub mod analysis;
mod error;
pub mod estimator;
pub mod io;
pub mod linalg;
pub mod simulation;
pub mod verify;

pub use error::{Error, Result};
