//! Conditional vision-transformer GAN that synthesizes functional
//! connectivity matrices from 3D structural volumes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod train;
pub mod types;

pub use error::{Error, Result};
