//! Desk-scale laboratory for differentially private fine-tuning of a
//! fill-in-the-middle code model and membership-inference auditing.

pub mod accountant;
pub mod corpus;
pub mod dp_optimizer;
pub mod error;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
