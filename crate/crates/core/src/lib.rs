//! Hierarchical federated learning over a clustered vehicular network.

pub mod clustering;
pub mod error;
pub mod fltrain;
pub mod harness;
pub mod hflagg;
pub mod mobility;
pub mod netlayer;

pub use error::{Error, Result};
