//! Text-conditioned diffusion generators behind one interface: a small
//! pixel-space model trained locally, and an adapter that forwards requests
//! to an external process hosting a pretrained latent diffusion model.

pub mod denoiser;
pub mod external;
pub mod schedule;
pub mod text;
pub mod toy;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use external::{ExternalAdapter, ExternalConfig};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use text::{PromptTemplate, TextEncoder, Vocabulary, PLACEHOLDER};
pub use toy::{train_toy_backend, BackendTrainConfig, NoisedSample, ToyBackend, ToyBackendConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Encoder output consumed directly by a local denoiser.
    Vector(Vec<f32>),
    /// Prompt forwarded to an external model, with the learned vector bound
    /// to the placeholder word when present.
    Prompt {
        text: String,
        placeholder: Option<Vec<f32>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 0 gives the deterministic DDIM update; larger values inject noise drawn
    /// from the same seeded stream.
    pub eta: f32,
    /// Classifier-free guidance weight; 1 disables the unconditional pass.
    pub guidance: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            eta: 0.0,
            guidance: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = (self.steps as u32).to_le_bytes().to_vec();
        b.extend_from_slice(&self.eta.to_le_bytes());
        b.extend_from_slice(&self.guidance.to_le_bytes());
        b
    }
}

pub trait Backend: Send + Sync {
    fn image_dims(&self) -> (usize, usize);
    fn embedding_dim(&self) -> usize;
    /// Hash of weights and sampler configuration.
    fn fingerprint(&self) -> [u8; 32];
    fn condition_placeholder(&self, template: &PromptTemplate, v: &[f32]) -> Result<Conditioning>;
    fn condition_text(&self, text: &str) -> Result<Conditioning>;
    /// Full reverse process from the Gaussian drawn from `seed`. Must be a
    /// pure function of `(weights, seed, cond, sampler)`.
    fn generate(&self, seed: u64, cond: &Conditioning) -> Result<Image>;
    /// Gradient access for textual inversion, when the backend supports it.
    fn as_invertible(&self) -> Option<&dyn Invertible> {
        None
    }
    /// Embedding of a vocabulary word, if the backend exposes one.
    fn word_embedding(&self, _word: &str) -> Option<Vec<f32>> {
        None
    }
}

/// Backends whose denoising objective can be differentiated with respect to
/// the placeholder embedding while every weight stays fixed.
pub trait Invertible {
    fn timesteps(&self) -> usize;
    fn to_model_space(&self, img: &Image) -> Result<Vec<f32>>;
    fn mean_word_embedding(&self) -> Vec<f32>;
    /// Mean over samples of `mean((eps - eps_hat)^2)` and, when requested,
    /// its gradient with respect to `v`.
    fn denoising_loss(
        &self,
        template: &PromptTemplate,
        v: &[f32],
        samples: &[NoisedSample],
        want_grad: bool,
    ) -> Result<(f32, Option<Vec<f32>>)>;
    /// Digests of the denoiser and text encoder parameters.
    fn frozen_digests(&self) -> ([u8; 32], [u8; 32]);
}

/// Contents of a backend config file (`--backend CFG`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Toy {
        checkpoint: PathBuf,
        #[serde(default)]
        sampler: SamplerConfig,
    },
    External(ExternalConfig),
}

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::audit::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: BackendConfig = toml::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg {
            BackendConfig::Toy { checkpoint, .. } => *checkpoint = base.join(&*checkpoint),
            BackendConfig::External(e) => e.checkpoint = base.join(&e.checkpoint),
        }
        Ok(cfg)
    }

    pub fn instantiate(&self) -> Result<Box<dyn Backend>> {
        match self {
            BackendConfig::Toy { checkpoint, sampler } => {
                let mut b = ToyBackend::load(checkpoint)?;
                b.sampler = *sampler;
                Ok(Box::new(b))
            }
            BackendConfig::External(e) => Ok(Box::new(ExternalAdapter::new(e.clone()))),
        }
    }
}
