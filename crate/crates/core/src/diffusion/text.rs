use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PLACEHOLDER: &str = "<S*>";

/// Whitespace tokenizer over a fixed word list.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    /// Template words, the placeholder, and the given class names.
    pub fn with_classes(class_names: &[String]) -> Self {
        let mut words: Vec<String> = ["a", "photo", "of", "natural", "collage", "images", PLACEHOLDER]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for n in class_names {
            if !words.contains(n) {
                words.push(n.clone());
            }
        }
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w).ok_or(Error::UnknownToken(w))
            })
            .collect()
    }
}

/// Prompt text with exactly one placeholder slot, e.g. `a photo of <S*>`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let n = text.split_whitespace().filter(|w| *w == PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::InvalidTemplate(format!(
                "expected exactly one {PLACEHOLDER}, found {n} in {text:?}"
            )));
        }
        Ok(Self { text: text.to_string() })
    }

    pub fn photo_of() -> Self {
        Self::parse("a photo of <S*>").unwrap()
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Ids of the words around the placeholder (placeholder excluded).
    pub fn context_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        self.text
            .split_whitespace()
            .filter(|w| *w != PLACEHOLDER)
            .map(|w| vocab.id(&w.to_lowercase()).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn fill(&self, word: &str) -> String {
        self.text.replace(PLACEHOLDER, word)
    }
}

/// Pooled text encoder: `cond = norm(P * sum_i embed(token_i))` where `norm`
/// centers and scales to unit variance. The placeholder slot contributes a
/// free vector `v` in place of a table row. Token embeddings are fixed random
/// vectors; only `P` is learned.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub cond_dim: usize,
    /// `[vocab][dim]`
    pub table: Vec<f32>,
    /// `[cond_dim][dim]`
    pub proj: Vec<f32>,
}

const NORM_EPS: f32 = 1e-9;

/// Per-coordinate standard deviation of the token embeddings.
pub const TOKEN_STD: f32 = 0.01;

impl TextEncoder {
    pub fn new(vocab: Vocabulary, dim: usize, cond_dim: usize, rng: &mut Rng) -> Self {
        let unit = Normal::new(0.0f32, TOKEN_STD).unwrap();
        let pstd = Normal::new(0.0f32, 1.0 / (4.0 * dim as f32).sqrt()).unwrap();
        Self {
            table: (0..vocab.len() * dim).map(|_| unit.sample(rng)).collect(),
            proj: (0..cond_dim * dim).map(|_| pstd.sample(rng)).collect(),
            vocab,
            dim,
            cond_dim,
        }
    }

    pub fn embedding(&self, id: usize) -> &[f32] {
        &self.table[id * self.dim..(id + 1) * self.dim]
    }

    pub fn mean_embedding(&self) -> Vec<f32> {
        let mut m = vec![0.0f32; self.dim];
        for row in self.table.chunks_exact(self.dim) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.vocab.len() as f32;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn pooled(&self, ids: &[usize], extra: Option<&[f32]>) -> Vec<f32> {
        let mut s = vec![0.0; self.dim];
        for &id in ids {
            for (a, b) in s.iter_mut().zip(self.embedding(id)) {
                *a += b;
            }
        }
        if let Some(v) = extra {
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
        }
        s
    }

    fn project(&self, pooled: &[f32]) -> Vec<f32> {
        self.proj
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(pooled).map(|(p, s)| p * s).sum::<f32>())
            .collect()
    }

    fn inv_std(u: &[f32]) -> (f32, f32) {
        let n = u.len() as f32;
        let mean = u.iter().sum::<f32>() / n;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        (mean, 1.0 / (var + NORM_EPS).sqrt())
    }

    pub fn encode_pooled(&self, pooled: &[f32]) -> Vec<f32> {
        let u = self.project(pooled);
        let (mean, r) = Self::inv_std(&u);
        u.iter().map(|v| (v - mean) * r).collect()
    }

    pub fn encode_ids(&self, ids: &[usize]) -> Vec<f32> {
        self.encode_pooled(&self.pooled(ids, None))
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.encode_ids(&self.vocab.tokenize(text)?))
    }

    /// Sum of token embeddings in template order, with `v` in the placeholder
    /// slot.
    pub fn pooled_template(&self, template: &PromptTemplate, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.dim {
            return Err(Error::Other(format!("embedding has {} entries, encoder expects {}", v.len(), self.dim)));
        }
        let mut s = vec![0.0f32; self.dim];
        for w in template.text().split_whitespace() {
            let row = if w == PLACEHOLDER {
                v
            } else {
                let w = w.to_lowercase();
                let id = self.vocab.id(&w).ok_or(Error::UnknownToken(w))?;
                self.embedding(id)
            };
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(s)
    }

    pub fn encode_template(&self, template: &PromptTemplate, v: &[f32]) -> Result<Vec<f32>> {
        Ok(self.encode_pooled(&self.pooled_template(template, v)?))
    }

    /// Gradient w.r.t. the projection output `u = P * pooled`.
    fn projected_grad(&self, pooled: &[f32], cond: &[f32], gcond: &[f32]) -> Vec<f32> {
        let (_, r) = Self::inv_std(&self.project(pooled));
        let n = cond.len() as f32;
        let mg = gcond.iter().sum::<f32>() / n;
        let mgy = gcond.iter().zip(cond).map(|(g, y)| g * y).sum::<f32>() / n;
        gcond.iter().zip(cond).map(|(g, y)| r * (g - mg - y * mgy)).collect()
    }

    /// Gradient w.r.t. the pooled vector given `gcond` at the output `cond`.
    /// Equals the gradient w.r.t. the placeholder vector.
    pub fn pooled_grad(&self, pooled: &[f32], cond: &[f32], gcond: &[f32]) -> Vec<f32> {
        let gu = self.projected_grad(pooled, cond, gcond);
        let mut g = vec![0.0f32; self.dim];
        for (row, gu) in self.proj.chunks_exact(self.dim).zip(gu) {
            for (a, p) in g.iter_mut().zip(row) {
                *a += gu * p;
            }
        }
        g
    }

    /// Accumulates the gradient of the projection `P` for backend training.
    pub fn accumulate_proj_grad(&self, pooled: &[f32], cond: &[f32], gcond: &[f32], gproj: &mut [f32]) {
        let gu = self.projected_grad(pooled, cond, gcond);
        for (row, gu) in gproj.chunks_exact_mut(self.dim).zip(gu) {
            for (gp, s) in row.iter_mut().zip(pooled) {
                *gp += gu * s;
            }
        }
    }

    pub fn params(&self) -> Vec<&[f32]> {
        vec![&self.table, &self.proj]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![&mut self.table, &mut self.proj]
    }
}
