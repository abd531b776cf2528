//! Desk-scale federated learning simulator.
//!
//! Everything is deterministic given a master seed: parameter containers and
//! analytic-gradient models, client-side local training, server-side federated
//! optimizers, gradient quantization/sparsification, differential privacy with
//! an RDP accountant, and a server/worker round engine that produces identical
//! results for any worker count.

pub mod aggregate;
pub mod client;
pub mod compress;
pub mod error;
pub mod orchestrate;
pub mod params;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
