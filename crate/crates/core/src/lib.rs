//! Distilling frozen GAN generator features into a student network.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod gan;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
