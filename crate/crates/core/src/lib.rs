//! Length-aware latent diffusion for text-conditioned motion synthesis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod ladiff;
pub mod lavae;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
