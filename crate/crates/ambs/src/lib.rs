//! Desk-scale safe reinforcement learning with approximate model-based
//! shielding.
//!
//! The crate is organised around one loop: learn a world model from replayed
//! experience, verify proposed actions by Monte Carlo rollouts inside that
//! model against a bounded-safety formula, and train task/backup policies
//! with penalty-augmented policy gradients. Exact finite-state oracles and
//! statistical validators for the underlying bounds live in [`measure`] and
//! [`theory`] so every approximation in the stack can be checked against an
//! independent computation.

pub mod agent;
pub mod env;
pub mod error;
pub mod formula;
pub mod mdp;
pub mod measure;
pub mod shield;
pub mod theory;
pub mod trace;
pub mod trainer;
pub mod worldmodel;

pub use error::{Error, Result};
