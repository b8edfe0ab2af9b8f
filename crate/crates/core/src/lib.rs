//! Federated learning simulator with channel-wise private/shared model
//! decoupling, cyclic distillation between the two subnets, and a set of
//! standard personalization baselines.

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod data;
pub mod decouple;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod runner;
pub mod server;

pub use error::{Error, Result};
