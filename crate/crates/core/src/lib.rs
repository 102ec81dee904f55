//! Federated latent-diffusion edge caching: a self-contained simulator.
//!
//! Clients hold private rating vectors, collaboratively train a lightweight
//! denoising diffusion model in a 16-dimensional latent space, and the base
//! station samples the aggregated model to predict content popularity and
//! fill a finite cache. The crate bundles everything needed end to end: a
//! small reverse-mode numeric engine, the autoencoder and 1-d U-Net models,
//! DDPM machinery, the federated protocol, MovieLens ingestion and the cache
//! simulator with baseline policies.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParameterSet;
pub use tensor::{Real, Tensor};
