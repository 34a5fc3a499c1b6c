//! Gated linear networks, frozen-gate ReLU networks and the convex
//! fixed-margin programs that characterize their implicit bias.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod linalg;
pub mod models;
pub mod nnls;
pub mod norms;
pub mod trainer;
pub mod par;
pub mod solvers;

pub use error::{Error, Result};
