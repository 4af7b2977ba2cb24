pub mod artifact;
pub mod audit;
pub mod bytes;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod inversion;
pub mod labeler;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod report;
pub mod toy;
pub mod trainer;
pub mod rng;

pub use error::{Error, Result};
