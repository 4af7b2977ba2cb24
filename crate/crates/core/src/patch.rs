//! Informative-patch selection with a frozen teacher and per-class collage
//! assembly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{CellSource, ClassId, Collage, LabeledImage, Patch};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::loss::cross_entropy;
use crate::nn::Classifier;
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `n_candidates` origins drawn uniformly over the valid range.
    #[default]
    UniformRandom,
    /// Every valid origin in row-major order; `n_candidates` is ignored.
    Exhaustive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the crop the teacher classifies most confidently.
    #[default]
    MinLoss,
    /// Ablation: keep the hardest crop.
    MaxLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSamplerConfig {
    pub n_candidates: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub selection: Selection,
}

impl PatchSamplerConfig {
    pub fn new(patch: usize, n_candidates: usize) -> Self {
        Self {
            n_candidates,
            patch_h: patch,
            patch_w: patch,
            sampling: Sampling::UniformRandom,
            selection: Selection::MinLoss,
        }
    }

    pub fn exhaustive(patch: usize) -> Self {
        Self {
            sampling: Sampling::Exhaustive,
            ..Self::new(patch, 1)
        }
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.patch_h > dims.0 || self.patch_w > dims.1 {
            return Err(Error::PatchLargerThanImage {
                patch: (self.patch_h, self.patch_w),
                image: dims,
            });
        }
        if self.n_candidates == 0 {
            return Err(Error::ConfigInvalid("n_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cross-entropy of the teacher on `patch` resized to its input resolution.
pub fn score_patch(teacher: &dyn Classifier, patch: &Image, label: ClassId) -> Result<f32> {
    let (h, w) = teacher.input_dims().ok_or(Error::TeacherInputMismatch)?;
    if label as usize >= teacher.num_classes() {
        return Err(Error::LabelOutOfRange(label as usize));
    }
    let logits = teacher.logits(&patch.resize(h, w));
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(cross_entropy(&logits, label as usize).max(0.0))
}

fn candidate_origins(cfg: &PatchSamplerConfig, dims: (usize, usize), seed: u64) -> Vec<(usize, usize)> {
    let (max_top, max_left) = (dims.0 - cfg.patch_h, dims.1 - cfg.patch_w);
    match cfg.sampling {
        Sampling::Exhaustive => (0..=max_top)
            .flat_map(|t| (0..=max_left).map(move |l| (t, l)))
            .collect(),
        Sampling::UniformRandom => {
            let mut rng = rng_for(seed, &[stream::PATCH]);
            (0..cfg.n_candidates)
                .map(|_| (rng.gen_range(0..=max_top), rng.gen_range(0..=max_left)))
                .collect()
        }
    }
}

/// Scores every candidate crop and keeps the best one under `cfg.selection`.
/// Equal scores resolve to the lexicographically smallest
/// `(top, left, sample index)`.
pub fn select_informative_patch(
    teacher: &dyn Classifier,
    image: &LabeledImage,
    cfg: &PatchSamplerConfig,
    rng_seed: u64,
) -> Result<Patch> {
    let dims = image.pixels.dims();
    cfg.check(dims)?;
    let mut best: Option<(f32, (usize, usize, usize), Image)> = None;
    for (idx, (top, left)) in candidate_origins(cfg, dims, rng_seed).into_iter().enumerate() {
        let crop = image.pixels.crop(top, left, cfg.patch_h, cfg.patch_w);
        let score = score_patch(teacher, &crop, image.label)?;
        let key = (top, left, idx);
        let better = match &best {
            None => true,
            Some((s, k, _)) => {
                let wins = match cfg.selection {
                    Selection::MinLoss => score < *s,
                    Selection::MaxLoss => score > *s,
                };
                wins || (score == *s && key < *k)
            }
        };
        if better {
            best = Some((score, key, crop));
        }
    }
    let (score, (top, left, _), pixels) = best.expect("at least one candidate");
    Ok(Patch {
        pixels,
        source_image_id: image.id,
        top,
        left,
        score: Some(score),
    })
}

/// Selects one patch per image. Each image draws from its own stream keyed by
/// `(global_seed, image id)`, so results do not depend on processing order.
pub fn select_patches(
    teacher: &dyn Classifier,
    images: &[LabeledImage],
    cfg: &PatchSamplerConfig,
    global_seed: u64,
) -> Result<BTreeMap<ClassId, Vec<Patch>>> {
    let mut out: BTreeMap<ClassId, Vec<Patch>> = BTreeMap::new();
    for img in images {
        let seed = crate::rng::mix(global_seed, &[img.id]);
        out.entry(img.label)
            .or_default()
            .push(select_informative_patch(teacher, img, cfg, seed)?);
    }
    Ok(out)
}

/// Center crops, for the "no patch selection" ablation.
pub fn center_patches(images: &[LabeledImage], patch: usize) -> Result<BTreeMap<ClassId, Vec<Patch>>> {
    let mut out: BTreeMap<ClassId, Vec<Patch>> = BTreeMap::new();
    for img in images {
        let (h, w) = img.pixels.dims();
        if patch > h || patch > w {
            return Err(Error::PatchLargerThanImage {
                patch: (patch, patch),
                image: (h, w),
            });
        }
        let (top, left) = ((h - patch) / 2, (w - patch) / 2);
        out.entry(img.label).or_default().push(Patch {
            pixels: img.pixels.crop(top, left, patch, patch),
            source_image_id: img.id,
            top,
            left,
            score: None,
        });
    }
    Ok(out)
}

/// Shuffles each class's patches, fills `grid` cells row-major (each patch
/// resized to the cell), and pads the final collage with re-sampled patches
/// drawn without replacement from those not already in it.
pub fn build_collages(
    patches: &BTreeMap<ClassId, Vec<Patch>>,
    grid: (usize, usize),
    out_h: usize,
    out_w: usize,
    rng_seed: u64,
) -> Result<Vec<Collage>> {
    if grid.0 == 0 || grid.1 == 0 || out_h % grid.0 != 0 || out_w % grid.1 != 0 {
        return Err(Error::IndivisibleGrid {
            dims: (out_h, out_w),
            grid,
        });
    }
    let cells = grid.0 * grid.1;
    let (ch, cw) = (out_h / grid.0, out_w / grid.1);
    let mut collages = Vec::new();
    for (&class, list) in patches {
        if list.is_empty() {
            return Err(Error::ConfigInvalid(format!("class {class} has no patches")));
        }
        let mut rng = rng_for(rng_seed, &[stream::COLLAGE, class as u64]);
        let mut order: Vec<(usize, bool)> = {
            let mut idx: Vec<usize> = (0..list.len()).collect();
            idx.shuffle(&mut rng);
            idx.into_iter().map(|i| (i, false)).collect()
        };
        let partial = order.len() % cells;
        if partial != 0 {
            let mut in_last: Vec<usize> = order[order.len() - partial..].iter().map(|p| p.0).collect();
            let mut pool: Vec<usize> = Vec::new();
            for _ in 0..cells - partial {
                if pool.is_empty() {
                    pool = (0..list.len()).filter(|i| !in_last.contains(i)).collect();
                    if pool.is_empty() {
                        pool = (0..list.len()).collect();
                    }
                    pool.shuffle(&mut rng);
                }
                let pick = pool.pop().unwrap();
                in_last.push(pick);
                order.push((pick, true));
            }
        }
        for chunk in order.chunks(cells) {
            let mut canvas = Image::zeros(out_h, out_w);
            let mut prov = Vec::with_capacity(cells);
            for (k, &(i, repeat)) in chunk.iter().enumerate() {
                let p = &list[i];
                canvas.paste(&p.pixels.resize(ch, cw), (k / grid.1) * ch, (k % grid.1) * cw);
                prov.push(CellSource::Source {
                    image_id: p.source_image_id,
                    repeat,
                });
            }
            collages.push(Collage::new(canvas, grid, prov, class)?);
        }
    }
    Ok(collages)
}
