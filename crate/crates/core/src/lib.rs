pub mod attack;
pub mod defense;
pub mod error;
pub mod gan;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod signal;
pub mod sobolev;
pub mod victim;

pub use error::{Error, Result};

#[cfg(test)]
mod fixtures;
