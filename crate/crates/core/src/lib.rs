//! Hallucinative topological memory: zero-shot visual planning from offline
//! exploration data.
//!
//! A conditional VAE hallucinates observations for an unseen obstacle
//! configuration, a contrastive energy model scores transitions between
//! them, and the shortest path through the resulting graph is followed by
//! an inverse-dynamics controller.

pub mod config;
pub mod connectivity;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod generator;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod selftest;
pub mod train;
pub mod world;

pub use error::{HtmError, Result};
