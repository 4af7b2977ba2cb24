//! Seed-pinned generation records and their teacher soft labels.

use serde::{Deserialize, Serialize};

use crate::data::{split_cell, CellSource, Collage, GenerationRecord, LabelPrecision, PromptEmbedding, SoftLabelSet};
use crate::diffusion::{Backend, PromptTemplate};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::loss::{one_hot, softmax_t};
use crate::nn::Classifier;
use crate::rng::record_seed;
use crate::trainer::LabelMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Patch budget per class.
    pub ipc: usize,
    pub grid: (usize, usize),
    pub mode: LabelMode,
    pub temperature: f32,
    pub precision: LabelPrecision,
    pub base_seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            grid: (2, 2),
            mode: LabelMode::Soft,
            temperature: 1.0,
            precision: LabelPrecision::F16,
            base_seed: 0,
        }
    }
}

impl LabelConfig {
    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn n_collages(&self) -> usize {
        self.ipc.div_ceil(self.cells())
    }

    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 {
            return Err(Error::ConfigInvalid("ipc must be at least 1".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::ConfigInvalid("grid dims must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::ConfigInvalid("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Teacher probabilities at temperature `tau` for each grid cell of `img`,
/// row-major, each cell resized to the teacher's input.
pub fn cell_probabilities(teacher: &dyn Classifier, img: &Image, grid: (usize, usize), tau: f32) -> Result<Vec<f32>> {
    let (th, tw) = teacher.input_dims().ok_or(Error::TeacherInputMismatch)?;
    let mut out = Vec::with_capacity(grid.0 * grid.1 * teacher.num_classes());
    for k in 0..grid.0 * grid.1 {
        let logits = teacher.logits(&split_cell(img, grid, k).resize(th, tw));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        out.extend(softmax_t(&logits, tau));
    }
    Ok(out)
}

fn check_grid(backend: &dyn Backend, grid: (usize, usize)) -> Result<()> {
    let dims = backend.image_dims();
    if dims.0 % grid.0 != 0 || dims.1 % grid.1 != 0 {
        return Err(Error::IndivisibleGrid { dims, grid });
    }
    Ok(())
}

/// One record per collage needed to cover `ipc` cells. Seeds follow
/// [`record_seed`]; soft mode generates each collage and labels every cell.
pub fn make_records(
    backend: &dyn Backend,
    template: &PromptTemplate,
    prompt: &PromptEmbedding,
    teacher: Option<&dyn Classifier>,
    cfg: &LabelConfig,
) -> Result<Vec<GenerationRecord>> {
    cfg.validate()?;
    check_grid(backend, cfg.grid)?;
    let cond = backend.condition_placeholder(template, &prompt.vector)?;
    (0..cfg.n_collages() as u64)
        .map(|i| {
            let seed = record_seed(cfg.base_seed, prompt.class_id, i);
            let soft_labels = match cfg.mode {
                LabelMode::OneHot => None,
                LabelMode::Soft => {
                    let teacher = teacher.ok_or_else(|| Error::ConfigInvalid("soft labels need a teacher".into()))?;
                    let img = backend.generate(seed, &cond)?;
                    let probs = cell_probabilities(teacher, &img, cfg.grid, cfg.temperature)?;
                    Some(SoftLabelSet::from_probabilities(
                        cfg.cells(),
                        teacher.num_classes(),
                        cfg.temperature,
                        &probs,
                        cfg.precision,
                    )?)
                }
            };
            Ok(GenerationRecord { seed, soft_labels })
        })
        .collect()
}

/// Regenerates the collage of `record`. When `expected` is given, the pixel
/// digest must match it. Labels are the stored rows, or `e_c` per cell in
/// one-hot mode.
pub fn replay(
    backend: &dyn Backend,
    template: &PromptTemplate,
    prompt: &PromptEmbedding,
    record: &GenerationRecord,
    grid: (usize, usize),
    classes: usize,
    expected: Option<[u8; 32]>,
) -> Result<(Collage, Vec<Vec<f32>>)> {
    check_grid(backend, grid)?;
    let cond = backend.condition_placeholder(template, &prompt.vector)?;
    let img = backend.generate(record.seed, &cond)?;
    if let Some(want) = expected {
        let found = img.digest();
        if found != want {
            return Err(Error::NonDeterministicBackend {
                expected: hex::encode(want),
                found: hex::encode(found),
            });
        }
    }
    let cells = grid.0 * grid.1;
    let labels = match &record.soft_labels {
        Some(s) => s.to_rows(),
        None => vec![one_hot(prompt.class_id as usize, classes); cells],
    };
    let collage = Collage::new(img, grid, vec![CellSource::Generated; cells], prompt.class_id)?;
    Ok((collage, labels))
}
