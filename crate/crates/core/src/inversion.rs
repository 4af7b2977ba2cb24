//! Per-class textual inversion: fit one placeholder embedding so the frozen
//! backend denoises that class's collages well.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Collage, PromptEmbedding};
use crate::diffusion::text::TOKEN_STD;
use crate::diffusion::{Backend, Conditioning, NoisedSample, PromptTemplate, PLACEHOLDER};
use crate::error::{Error, Result};
use crate::nn::{Optimizer, OptimizerKind};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingInit {
    /// Class-name token when the backend knows it, otherwise the mean
    /// vocabulary embedding plus seeded Gaussian noise of std `noise`.
    ClassToken { noise: f32 },
    MeanPlusNoise { noise: f32 },
}

impl Default for EmbeddingInit {
    fn default() -> Self {
        EmbeddingInit::ClassToken { noise: TOKEN_STD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub init: EmbeddingInit,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 5e-3,
            batch_size: 4,
            optimizer: OptimizerKind::sgd(),
            init: EmbeddingInit::default(),
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::ConfigInvalid("inversion lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub embedding: PromptEmbedding,
    pub init: Vec<f32>,
    /// Minibatch loss before each update.
    pub losses: Vec<f32>,
    /// Number of scalars that received updates.
    pub trainable: usize,
    /// Denoiser and text-encoder digests before and after the run.
    pub frozen_before: ([u8; 32], [u8; 32]),
    pub frozen_after: ([u8; 32], [u8; 32]),
}

pub fn initial_embedding(
    backend: &dyn Backend,
    class_id: ClassId,
    class_name: Option<&str>,
    init: EmbeddingInit,
    seed: u64,
) -> Result<Vec<f32>> {
    let token = match init {
        EmbeddingInit::ClassToken { .. } => class_name.and_then(|n| backend.word_embedding(n)),
        EmbeddingInit::MeanPlusNoise { .. } => None,
    };
    if let Some(v) = token {
        return Ok(v);
    }
    let noise = match init {
        EmbeddingInit::ClassToken { noise } | EmbeddingInit::MeanPlusNoise { noise } => noise,
    };
    let inv = backend
        .as_invertible()
        .ok_or_else(|| Error::BackendUnavailable("backend does not expose embeddings".into()))?;
    let mut rng = rng_for(seed, &[stream::INIT, class_id as u64]);
    let normal = Normal::new(0.0f32, noise.max(0.0)).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    Ok(inv.mean_word_embedding().into_iter().map(|m| m + normal.sample(&mut rng)).collect())
}

/// Optimizes the placeholder vector with every backend weight fixed. The
/// minibatch at step `s` draws collages, timesteps and noise from the stream
/// `(seed, INVERT, class_id)`.
pub fn invert_class(
    backend: &dyn Backend,
    template: &PromptTemplate,
    collages: &[Collage],
    class_id: ClassId,
    class_name: Option<&str>,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    let inv = backend
        .as_invertible()
        .ok_or_else(|| Error::BackendUnavailable("backend does not support inversion".into()))?;
    let init = initial_embedding(backend, class_id, class_name, cfg.init, cfg.seed)?;
    let frozen_before = inv.frozen_digests();
    let mut v = init.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        if collages.is_empty() {
            return Err(Error::EmptyCollageSet);
        }
        let data = collages
            .iter()
            .map(|c| inv.to_model_space(&c.pixels))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = rng_for(cfg.seed, &[stream::INVERT, class_id as u64]);
        let mut opt = Optimizer::new(cfg.optimizer, 0.0);
        for step in 0..cfg.steps {
            let offset: f64 = rng.gen();
            let batch: Vec<NoisedSample> = (0..cfg.batch_size)
                .map(|k| {
                    let i = rng.gen_range(0..data.len());
                    let t = stratified_timestep(k, offset, cfg.batch_size, inv.timesteps());
                    NoisedSample::draw_at(data[i].clone(), t, &mut rng)
                })
                .collect();
            let (loss, grad) = inv.denoising_loss(template, &v, &batch, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            losses.push(loss);
            let grad = grad.expect("gradient requested");
            opt.step(vec![&mut v[..]], &[grad], cfg.lr);
        }
    }
    let frozen_after = inv.frozen_digests();
    Ok(InversionResult {
        embedding: PromptEmbedding::new(class_id, v)?,
        trainable: init.len(),
        init,
        losses,
        frozen_before,
        frozen_after,
    })
}

/// Timestep for slot `k` of a batch of `n`: one shared uniform offset places
/// one draw in each of `n` equal strata, so every slot is marginally uniform.
fn stratified_timestep(k: usize, offset: f64, n: usize, timesteps: usize) -> usize {
    (((k as f64 + offset) / n as f64 * timesteps as f64) as usize).min(timesteps - 1)
}

pub const BASELINE_PROMPT: &str = "a natural collage of {} images";

/// Conditioning from a hand-written prompt, with `{}` replaced by the class
/// name. No parameters are learned.
pub fn engineered_prompt_baseline(backend: &dyn Backend, class_name: &str, template: &str) -> Result<Conditioning> {
    backend.condition_text(&template.replace("{}", class_name))
}

/// The engineered prompt expressed as a placeholder template plus the class
/// token's embedding, so it can be packed and replayed like a learned prompt.
pub fn baseline_embedding(
    backend: &dyn Backend,
    class_id: ClassId,
    class_name: &str,
    template: &str,
) -> Result<(PromptTemplate, PromptEmbedding)> {
    let t = PromptTemplate::parse(&template.replace("{}", PLACEHOLDER))?;
    let v = backend
        .word_embedding(class_name)
        .ok_or_else(|| Error::UnknownToken(class_name.to_string()))?;
    Ok((t, PromptEmbedding::new(class_id, v)?))
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(losses: &[f32], window: usize) -> Vec<f32> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().sum::<f32>() / (i + 1 - lo) as f32
        })
        .collect()
}

pub fn write_loss_csv(path: &Path, losses: &[f32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Other(e.to_string()))?;
    w.write_record(["step", "loss"]).map_err(|e| Error::Other(e.to_string()))?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])
            .map_err(|e| Error::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
