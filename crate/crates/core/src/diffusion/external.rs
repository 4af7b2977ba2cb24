//! Adapter for a pretrained model served by an external command.
//!
//! Each generation spawns `command` and writes one JSON request to its stdin:
//!
//! ```json
//! {"model_id": "...", "checkpoint": "...", "seed": 7, "height": 512,
//!  "width": 512, "sampler": {"steps": 50, "eta": 0.0},
//!  "prompt": "a photo of <S*>", "placeholder": [0.1, ...] | null,
//!  "vector": null}
//! ```
//!
//! The command answers on stdout with `{"height": h, "width": w, "pixels": [...]}`
//! where `pixels` is planar RGB in `[0, 1]`.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::text::PromptTemplate;
use super::{Backend, Conditioning, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub model_id: String,
    pub checkpoint: PathBuf,
    pub command: Vec<String>,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn default_side() -> usize {
    512
}

fn default_dim() -> usize {
    768
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_id: String,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub sampler: SamplerConfig,
    pub prompt: Option<String>,
    pub placeholder: Option<Vec<f32>>,
    pub vector: Option<Vec<f32>>,
}

#[derive(Deserialize)]
struct GenerationResponse {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

pub struct ExternalAdapter {
    pub config: ExternalConfig,
    log: Mutex<Vec<GenerationRequest>>,
}

impl ExternalAdapter {
    pub fn new(config: ExternalConfig) -> Self {
        Self {
            config,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Every request issued so far, in order.
    pub fn request_log(&self) -> Vec<GenerationRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn request(&self, seed: u64, cond: &Conditioning) -> GenerationRequest {
        let c = &self.config;
        let (prompt, placeholder, vector) = match cond {
            Conditioning::Prompt { text, placeholder } => (Some(text.clone()), placeholder.clone(), None),
            Conditioning::Vector(v) => (None, None, Some(v.clone())),
        };
        GenerationRequest {
            model_id: c.model_id.clone(),
            checkpoint: c.checkpoint.clone(),
            seed,
            height: c.height,
            width: c.width,
            sampler: c.sampler,
            prompt,
            placeholder,
            vector,
        }
    }

    fn call(&self, req: &GenerationRequest) -> Result<Image> {
        let unavailable = |m: String| Error::BackendUnavailable(format!("{}: {m}", self.config.model_id));
        if !self.config.checkpoint.exists() {
            return Err(unavailable(format!("checkpoint {} not found", self.config.checkpoint.display())));
        }
        let (prog, args) = self
            .config
            .command
            .split_first()
            .ok_or_else(|| unavailable("no command configured".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| unavailable(e.to_string()))?;
        let body = serde_json::to_vec(req)?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&body)
            .map_err(|e| unavailable(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| unavailable(e.to_string()))?;
        if !out.status.success() {
            return Err(unavailable(format!("command exited with {}", out.status)));
        }
        let resp: GenerationResponse =
            serde_json::from_slice(&out.stdout).map_err(|e| unavailable(format!("bad response: {e}")))?;
        let img = Image::new(resp.height, resp.width, resp.pixels);
        if !img.is_valid() {
            return Err(unavailable("response pixels out of range".into()));
        }
        Ok(img)
    }
}

impl Backend for ExternalAdapter {
    fn image_dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn fingerprint(&self) -> [u8; 32] {
        let c = &self.config;
        let mut h = Sha256::new();
        h.update(c.model_id.as_bytes());
        h.update([0]);
        h.update(c.checkpoint.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(c.sampler.to_bytes());
        h.update((c.height as u32).to_le_bytes());
        h.update((c.width as u32).to_le_bytes());
        h.finalize().into()
    }

    fn condition_placeholder(&self, template: &PromptTemplate, v: &[f32]) -> Result<Conditioning> {
        Ok(Conditioning::Prompt {
            text: template.text().to_string(),
            placeholder: Some(v.to_vec()),
        })
    }

    fn condition_text(&self, text: &str) -> Result<Conditioning> {
        Ok(Conditioning::Prompt {
            text: text.to_string(),
            placeholder: None,
        })
    }

    fn generate(&self, seed: u64, cond: &Conditioning) -> Result<Image> {
        let req = self.request(seed, cond);
        self.log.lock().unwrap().push(req.clone());
        self.call(&req)
    }
}
