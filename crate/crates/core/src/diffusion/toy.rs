//! Desk-scale pixel-space conditional diffusion model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::Denoiser;
use super::schedule::{NoiseSchedule, ScheduleKind};
use super::text::{PromptTemplate, TextEncoder, Vocabulary};
use super::{Backend, Conditioning, Invertible, SamplerConfig};
use crate::bytes::{put_string, Reader};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::classifier::digest_params;
use crate::nn::{cosine_lr, Optimizer, OptimizerKind};
use crate::rng::{rng_for, stream, Rng};
use crate::toy::CaptionedImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackendConfig {
    pub image_size: usize,
    /// Word-embedding width `d`.
    pub embedding_dim: usize,
    pub cond_dim: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            embedding_dim: 768,
            cond_dim: 64,
            channels: 24,
            timesteps: 200,
            schedule: ScheduleKind::Cosine { s: 0.008 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Probability of training a sample with the null conditioning, which
    /// enables guided sampling.
    pub cond_dropout: f32,
    pub seed: u64,
}

impl Default for BackendTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 4e-3,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f32>,
}

/// One term of the denoising objective: a clean image in model space, a
/// timestep, and the noise that was added.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedSample {
    pub x0: Vec<f32>,
    pub t: usize,
    pub eps: Vec<f32>,
}

impl NoisedSample {
    pub fn draw(x0: Vec<f32>, timesteps: usize, rng: &mut Rng) -> Self {
        let t = rng.gen_range(0..timesteps);
        Self::draw_at(x0, t, rng)
    }

    /// Fresh noise at a given timestep.
    pub fn draw_at(x0: Vec<f32>, t: usize, rng: &mut Rng) -> Self {
        let eps = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
        Self { x0, t, eps }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackend {
    pub config: ToyBackendConfig,
    pub schedule: NoiseSchedule,
    pub encoder: TextEncoder,
    pub denoiser: Denoiser,
    pub sampler: SamplerConfig,
    /// False for freshly initialized weights.
    pub trained: bool,
}

impl ToyBackend {
    pub fn new(config: ToyBackendConfig, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[stream::BACKEND, 0]);
        let encoder = TextEncoder::new(vocab, config.embedding_dim, config.cond_dim, &mut rng);
        let denoiser = Denoiser::new(config.channels, config.cond_dim, &mut rng);
        Self {
            schedule: NoiseSchedule::new(config.schedule, config.timesteps),
            encoder,
            denoiser,
            sampler: SamplerConfig::default(),
            trained: false,
            config,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.config.image_size, self.config.image_size)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.encoder.params_mut();
        v.extend(self.denoiser.params_mut());
        v
    }

    pub fn encode_image(img: &Image) -> Vec<f32> {
        img.data().iter().map(|v| 2.0 * v - 1.0).collect()
    }

    fn check_cond(&self, cond: &Conditioning) -> Result<Vec<f32>> {
        match cond {
            Conditioning::Vector(v) if v.len() == self.config.cond_dim => Ok(v.clone()),
            Conditioning::Vector(v) => Err(Error::Other(format!(
                "conditioning has {} entries, denoiser expects {}",
                v.len(),
                self.config.cond_dim
            ))),
            Conditioning::Prompt { .. } => Err(Error::Other("toy backend needs an encoded conditioning vector".into())),
        }
    }

    /// DDIM reverse process; with `eta > 0` the extra noise continues the
    /// stream seeded by `seed`. Guidance mixes in the prediction for the
    /// all-zero conditioning, which is what the empty prompt encodes to.
    pub fn sample(&self, seed: u64, cond: &[f32]) -> Result<Image> {
        let (h, w) = self.dims();
        let mut rng = Rng::seed_from_u64(seed);
        let n = CHANNELS * h * w;
        let mut x: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ts = self.schedule.sampling_timesteps(self.sampler.steps);
        let mut x0 = vec![0.0f32; n];
        let null = vec![0.0f32; cond.len()];
        for (k, &t) in ts.iter().enumerate() {
            let mut eps = self.denoiser.predict(&x, h, w, t, cond);
            if self.sampler.guidance != 1.0 {
                let g = self.sampler.guidance;
                let uncond = self.denoiser.predict(&x, h, w, t, &null);
                for (e, u) in eps.iter_mut().zip(&uncond) {
                    *e = u + g * (*e - u);
                }
            }
            if eps.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation("sampling"));
            }
            let ab = self.schedule.alpha_bar(t);
            let ab_prev = ts.get(k + 1).map(|&tp| self.schedule.alpha_bar(tp)).unwrap_or(1.0);
            let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            for i in 0..n {
                x0[i] = ((x[i] - sn * eps[i]) / sa).clamp(-1.0, 1.0);
            }
            if k + 1 == ts.len() {
                break;
            }
            let sigma = (self.sampler.eta as f64
                * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
                * (1.0 - ab / ab_prev).max(0.0).sqrt()) as f32;
            let dir = ((1.0 - ab_prev) as f32 - sigma * sigma).max(0.0).sqrt();
            let sp = ab_prev.sqrt() as f32;
            for i in 0..n {
                // Re-derive the noise consistent with the clipped x0.
                let e = (x[i] - sa * x0[i]) / sn;
                x[i] = sp * x0[i] + dir * e;
                if sigma > 0.0 {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    x[i] += sigma * z;
                }
            }
        }
        Ok(Image::new(h, w, x0.into_iter().map(|v| 0.5 * (v + 1.0)).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(BACKEND_MAGIC);
        out.extend_from_slice(&1u16.to_le_bytes());
        match c.schedule {
            ScheduleKind::Linear { beta_start, beta_end } => {
                out.push(0);
                out.extend_from_slice(&beta_start.to_le_bytes());
                out.extend_from_slice(&beta_end.to_le_bytes());
            }
            ScheduleKind::Cosine { s } => {
                out.push(1);
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        for v in [c.timesteps, c.image_size, c.embedding_dim, c.cond_dim, c.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.trained as u8);
        out.extend_from_slice(&(self.encoder.vocab.len() as u32).to_le_bytes());
        for w in self.encoder.vocab.words() {
            put_string(&mut out, w);
        }
        for p in self.encoder.params().into_iter().chain(self.denoiser.params()) {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != BACKEND_MAGIC {
            return Err(Error::MalformedArtifact("not a toy backend checkpoint".into()));
        }
        let version = r.u16()?;
        if version != 1 {
            return Err(Error::VersionUnsupported(version));
        }
        let kind = r.u8()?;
        let (p0, p1) = (r.f64()?, r.f64()?);
        let schedule = match kind {
            0 => ScheduleKind::Linear {
                beta_start: p0,
                beta_end: p1,
            },
            1 => ScheduleKind::Cosine { s: p0 },
            _ => return Err(Error::MalformedArtifact("unknown schedule".into())),
        };
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let trained = r.u8()? != 0;
        let nwords = r.u32()? as usize;
        let words = (0..nwords).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let config = ToyBackendConfig {
            timesteps: dims[0],
            image_size: dims[1],
            embedding_dim: dims[2],
            cond_dim: dims[3],
            channels: dims[4],
            schedule,
        };
        let mut b = ToyBackend::new(config, Vocabulary::new(words), 0);
        b.trained = trained;
        for p in b.params_mut() {
            let n = r.u32()? as usize;
            if n != p.len() {
                return Err(Error::MalformedArtifact("parameter size mismatch".into()));
            }
            for v in p.iter_mut() {
                *v = r.f32()?;
            }
        }
        if r.remaining() != 0 {
            return Err(Error::MalformedArtifact("trailing bytes".into()));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::audit::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const BACKEND_MAGIC: &[u8; 4] = b"D3MB";

impl Backend for ToyBackend {
    fn image_dims(&self) -> (usize, usize) {
        self.dims()
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        h.update(self.sampler.to_bytes());
        h.finalize().into()
    }

    fn condition_placeholder(&self, template: &PromptTemplate, v: &[f32]) -> Result<Conditioning> {
        Ok(Conditioning::Vector(self.encoder.encode_template(template, v)?))
    }

    fn condition_text(&self, text: &str) -> Result<Conditioning> {
        Ok(Conditioning::Vector(self.encoder.encode_text(text)?))
    }

    fn generate(&self, seed: u64, cond: &Conditioning) -> Result<Image> {
        let c = self.check_cond(cond)?;
        self.sample(seed, &c)
    }

    fn as_invertible(&self) -> Option<&dyn Invertible> {
        Some(self)
    }

    fn word_embedding(&self, word: &str) -> Option<Vec<f32>> {
        self.encoder.vocab.id(word).map(|id| self.encoder.embedding(id).to_vec())
    }
}

impl Invertible for ToyBackend {
    fn timesteps(&self) -> usize {
        self.schedule.steps
    }

    fn to_model_space(&self, img: &Image) -> Result<Vec<f32>> {
        if img.dims() != self.dims() {
            return Err(Error::Other(format!(
                "collage is {:?}, backend generates {:?}",
                img.dims(),
                self.dims()
            )));
        }
        Ok(Self::encode_image(img))
    }

    fn mean_word_embedding(&self) -> Vec<f32> {
        self.encoder.mean_embedding()
    }

    fn denoising_loss(
        &self,
        template: &PromptTemplate,
        v: &[f32],
        samples: &[NoisedSample],
        want_grad: bool,
    ) -> Result<(f32, Option<Vec<f32>>)> {
        let cond = self.encoder.encode_template(template, v)?;
        let (h, w) = self.dims();
        let mut gcond = vec![0.0f32; cond.len()];
        let mut total = 0.0f64;
        for s in samples {
            let xt = self.schedule.add_noise(&s.x0, s.t, &s.eps)?;
            let (pred, trace) = self.denoiser.forward(&xt, h, w, s.t, &cond);
            let n = pred.len() as f32;
            let scale = 2.0 / (n * samples.len() as f32);
            let mut gout = Vec::with_capacity(pred.len());
            let mut se = 0.0f64;
            for (p, e) in pred.iter().zip(&s.eps) {
                let d = p - e;
                se += (d as f64) * (d as f64);
                gout.push(scale * d);
            }
            total += se / n as f64;
            if want_grad {
                let g = self.denoiser.backward(&trace, &gout, None);
                for (a, b) in gcond.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let loss = (total / samples.len().max(1) as f64) as f32;
        let grad = match want_grad {
            true => Some(self.encoder.pooled_grad(&self.encoder.pooled_template(template, v)?, &cond, &gcond)),
            false => None,
        };
        Ok((loss, grad))
    }

    fn frozen_digests(&self) -> ([u8; 32], [u8; 32]) {
        (digest_params(self.denoiser.params()), digest_params(self.encoder.params()))
    }
}

/// Trains encoder and denoiser jointly on captioned images with the standard
/// noise-prediction objective. `epochs == 0` returns the initialization with
/// `trained == false`.
pub fn train_toy_backend(
    corpus: &[CaptionedImage],
    vocab: Vocabulary,
    arch: ToyBackendConfig,
    cfg: &BackendTrainConfig,
) -> Result<(ToyBackend, TrainLog)> {
    let mut backend = ToyBackend::new(arch, vocab, cfg.seed);
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((backend, log));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = backend.dims();
    let data: Vec<(Vec<f32>, Vec<usize>)> = corpus
        .iter()
        .map(|c| {
            if c.image.dims() != dims {
                return Err(Error::InconsistentDims {
                    index: 0,
                    expected: dims,
                    found: c.image.dims(),
                });
            }
            Ok((ToyBackend::encode_image(&c.image), backend.encoder.vocab.tokenize(&c.caption)?))
        })
        .collect::<Result<_>>()?;
    let mut rng = rng_for(cfg.seed, &[stream::BACKEND, 1]);
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (h, w) = dims;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            let mut eg = vec![vec![0.0; backend.encoder.table.len()], vec![0.0; backend.encoder.proj.len()]];
            let mut dg: Vec<Vec<f32>> = backend.denoiser.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for &i in chunk {
                let (x0, ids) = &data[i];
                let s = NoisedSample::draw(x0.clone(), backend.schedule.steps, &mut rng);
                let drop = rng.gen::<f32>() < cfg.cond_dropout;
                let pooled = backend.encoder.pooled(ids, None);
                let cond = match drop {
                    true => vec![0.0; backend.config.cond_dim],
                    false => backend.encoder.encode_pooled(&pooled),
                };
                let xt = backend.schedule.add_noise(&s.x0, s.t, &s.eps)?;
                let (pred, trace) = backend.denoiser.forward(&xt, h, w, s.t, &cond);
                let n = pred.len() as f32;
                let scale = 2.0 / (n * chunk.len() as f32);
                let mut se = 0.0f64;
                let gout: Vec<f32> = pred
                    .iter()
                    .zip(&s.eps)
                    .map(|(p, e)| {
                        se += ((p - e) as f64).powi(2);
                        scale * (p - e)
                    })
                    .collect();
                epoch_loss += se / n as f64;
                let gc = backend.denoiser.backward(&trace, &gout, Some(&mut dg));
                if !drop {
                    backend.encoder.accumulate_proj_grad(&pooled, &cond, &gc, &mut eg[1]);
                }
            }
            let mut grads = eg;
            grads.extend(dg);
            clip_global_norm(&mut grads, 1.0);
            let lr = cosine_lr(cfg.lr, step, total_steps);
            opt.step(backend.params_mut(), &grads, lr);
            step += 1;
        }
        let mean = (epoch_loss / data.len() as f64) as f32;
        log::debug!("backend epoch {epoch}: loss {mean:.5}");
        if !mean.is_finite() {
            return Err(Error::DivergedTraining { epoch, loss: mean });
        }
        log.epoch_losses.push(mean);
    }
    backend.trained = true;
    Ok((backend, log))
}

fn clip_global_norm(grads: &mut [Vec<f32>], max: f32) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| (*v as f64) * (*v as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max {
        let s = max / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
}
