//! Federated cross-domain recommendation with normalized low-rank directions.
//!
//! Clients fine-tune low-rank adapters on a frozen sequential recommender.
//! The server rescales each client's update to a unit-norm direction and
//! broadcasts every direction to every client, which then learns its own
//! weights for combining them.

pub mod backbone;
pub mod client;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod lowrank;
pub mod metrics;
pub mod oracle;
pub mod server;
pub mod verify;
pub mod wire;

pub use error::{Error, Result};
