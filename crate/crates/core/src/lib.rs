//! Model-internal confidence estimation for sequence-to-sequence models.

pub mod align;
pub mod autoenc;
pub mod confidence;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod experiment;
pub mod optim;
pub mod rng;
pub mod seq2seq;
pub mod shallow;
pub mod similarity;
pub mod statestore;
pub mod tensor;

pub use error::{Error, Result};
