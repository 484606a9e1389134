//! Hybrid model/data predictive control with Wasserstein scenario robustness.
//!
//! A known subsystem is propagated with a parametric model, an unknown one
//! through a data Hankel matrix, and the input is chosen to minimize the worst
//! expected tracking cost over sampled parameter/noise scenarios.

pub mod ambiguity;
pub mod bench;
pub mod controllers;
pub mod error;
pub mod linalg;
pub mod plant;
pub mod qpcore;
pub mod seeds;
pub mod trajkit;

pub use error::{Error, Result};
