//! Shared domain types, dataset validation, and on-disk dataset layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub type ClassId = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub pixels: Image,
    pub label: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    pub source_image_id: u64,
    pub top: usize,
    pub left: usize,
    /// Teacher cross-entropy of this crop; `None` until scored.
    pub score: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSource {
    /// Patch taken from a training image. `repeat` marks padding re-samples.
    Source { image_id: u64, repeat: bool },
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Collage {
    pub pixels: Image,
    pub grid: (usize, usize),
    pub cells: Vec<CellSource>,
    pub class_id: ClassId,
}

impl Collage {
    pub fn new(
        pixels: Image,
        grid: (usize, usize),
        cells: Vec<CellSource>,
        class_id: ClassId,
    ) -> Result<Self> {
        let (h, w) = pixels.dims();
        if grid.0 == 0 || grid.1 == 0 || h % grid.0 != 0 || w % grid.1 != 0 {
            return Err(Error::IndivisibleGrid { dims: (h, w), grid });
        }
        if cells.len() != grid.0 * grid.1 {
            return Err(Error::Other(format!(
                "collage has {} cells for a {}x{} grid",
                cells.len(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self {
            pixels,
            grid,
            cells,
            class_id,
        })
    }

    pub fn cell_dims(&self) -> (usize, usize) {
        (
            self.pixels.height() / self.grid.0,
            self.pixels.width() / self.grid.1,
        )
    }

    /// Row-major crop of cell `k`.
    pub fn cell(&self, k: usize) -> Image {
        split_cell(&self.pixels, self.grid, k)
    }
}

/// Row-major crop of cell `k` of an image laid out as a `grid`.
pub fn split_cell(img: &Image, grid: (usize, usize), k: usize) -> Image {
    let (ch, cw) = (img.height() / grid.0, img.width() / grid.1);
    let (r, c) = (k / grid.1, k % grid.1);
    img.crop(r * ch, c * cw, ch, cw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub class_id: ClassId,
    pub vector: Vec<f32>,
}

impl PromptEmbedding {
    pub fn new(class_id: ClassId, vector: Vec<f32>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Other("prompt embedding has non-finite entries".into()));
        }
        Ok(Self { class_id, vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelPrecision {
    F32,
    #[default]
    F16,
}

impl LabelPrecision {
    pub fn bytes(self) -> usize {
        match self {
            LabelPrecision::F32 => 4,
            LabelPrecision::F16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum LabelValues {
    F32(Vec<f32>),
    F16(Vec<u16>),
}

/// Per-cell probability vectors (`rows` x `classes`). Half-precision storage
/// keeps the raw codes; decoded rows are renormalized so they sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    rows: usize,
    classes: usize,
    temperature: f32,
    values: LabelValues,
}

pub const ROW_SUM_TOLERANCE: f32 = 1e-5;

impl SoftLabelSet {
    pub fn from_probabilities(
        rows: usize,
        classes: usize,
        temperature: f32,
        probs: &[f32],
        precision: LabelPrecision,
    ) -> Result<Self> {
        if probs.len() != rows * classes {
            return Err(Error::Other("soft label matrix has wrong size".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::ConfigInvalid("temperature must be positive".into()));
        }
        for row in probs.chunks(classes) {
            let s: f32 = row.iter().sum();
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) || (s - 1.0).abs() > 1e-4 {
                return Err(Error::Other(format!("row is not a probability vector (sum {s})")));
            }
        }
        let values = match precision {
            LabelPrecision::F32 => LabelValues::F32(probs.to_vec()),
            LabelPrecision::F16 => {
                LabelValues::F16(probs.iter().map(|&p| f16::from_f32(p).to_bits()).collect())
            }
        };
        Ok(Self {
            rows,
            classes,
            temperature,
            values,
        })
    }

    pub(crate) fn from_raw_f32(rows: usize, classes: usize, temperature: f32, v: Vec<f32>) -> Self {
        Self {
            rows,
            classes,
            temperature,
            values: LabelValues::F32(v),
        }
    }

    pub(crate) fn from_raw_f16(rows: usize, classes: usize, temperature: f32, v: Vec<u16>) -> Self {
        Self {
            rows,
            classes,
            temperature,
            values: LabelValues::F16(v),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn precision(&self) -> LabelPrecision {
        match self.values {
            LabelValues::F32(_) => LabelPrecision::F32,
            LabelValues::F16(_) => LabelPrecision::F16,
        }
    }

    pub fn row(&self, i: usize) -> Vec<f32> {
        let span = i * self.classes..(i + 1) * self.classes;
        match &self.values {
            LabelValues::F32(v) => v[span].to_vec(),
            LabelValues::F16(v) => {
                let raw: Vec<f32> = v[span].iter().map(|&b| f16::from_bits(b).to_f32()).collect();
                let s: f32 = raw.iter().sum();
                raw.into_iter().map(|p| p / s).collect()
            }
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|i| self.row(i)).collect()
    }

    /// Little-endian encoding of the stored values.
    pub fn encode(&self, out: &mut Vec<u8>) {
        match &self.values {
            LabelValues::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            LabelValues::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    pub fn encoded_len(&self) -> usize {
        self.rows * self.classes * self.precision().bytes()
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.to_rows().iter().all(|r| {
            r.iter().all(|&p| p >= 0.0 && p.is_finite())
                && (r.iter().sum::<f32>() - 1.0).abs() <= ROW_SUM_TOLERANCE
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub seed: u64,
    pub soft_labels: Option<SoftLabelSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_images: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub per_class: Vec<usize>,
}

pub fn validate_dataset(images: &[LabeledImage], num_classes: usize) -> Result<DatasetSummary> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let dims = first.pixels.dims();
    let mut per_class = vec![0usize; num_classes];
    for (i, img) in images.iter().enumerate() {
        let label = img.label as usize;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange(i));
        }
        if img.pixels.dims() != dims || img.pixels.height() == 0 || img.pixels.width() == 0 {
            return Err(Error::InconsistentDims {
                index: i,
                expected: dims,
                found: img.pixels.dims(),
            });
        }
        if !img.pixels.is_valid() {
            return Err(Error::NonFinitePixel(i));
        }
        per_class[label] += 1;
    }
    Ok(DatasetSummary {
        num_images: images.len(),
        num_classes,
        height: dims.0,
        width: dims.1,
        per_class,
    })
}

/// `manifest.json` at the root of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub image_count: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn by_class(&self) -> BTreeMap<ClassId, Vec<&LabeledImage>> {
        let mut map: BTreeMap<ClassId, Vec<&LabeledImage>> = BTreeMap::new();
        for img in &self.images {
            map.entry(img.label).or_default().push(img);
        }
        map
    }

    pub fn summary(&self) -> Result<DatasetSummary> {
        validate_dataset(&self.images, self.num_classes())
    }

    /// Writes `<dir>/<class>/<id>.png` plus `manifest.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let summary = self.summary()?;
        for name in &self.class_names {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for img in &self.images {
            let p = dir
                .join(&self.class_names[img.label as usize])
                .join(format!("{:06}.png", img.id));
            img.pixels.save_png(&p)?;
        }
        let manifest = DatasetManifest {
            classes: self.class_names.clone(),
            image_count: self.images.len(),
            height: summary.height,
            width: summary.width,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset directory; images whose size differs from the manifest
    /// resolution are resized on ingest. Image ids come from file stems when
    /// numeric, otherwise from enumeration order.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_str(
            &crate::audit::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?,
        )?;
        let mut images = Vec::new();
        for (label, name) in manifest.classes.iter().enumerate() {
            let sub = dir.join(name);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&sub)
                .map_err(|e| Error::io(&sub, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(|s| s.to_ascii_lowercase()).as_deref(),
                        Some("png" | "jpg" | "jpeg" | "bmp")
                    )
                })
                .collect();
            files.sort();
            for f in files {
                let mut px = Image::load(&f)?;
                if px.dims() != (manifest.height, manifest.width) {
                    px = px.resize(manifest.height, manifest.width);
                }
                let id = f
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(images.len() as u64);
                images.push(LabeledImage {
                    id,
                    pixels: px.clamp01(),
                    label: label as ClassId,
                });
            }
        }
        if images.len() != manifest.image_count {
            return Err(Error::ConfigInvalid(format!(
                "manifest lists {} images, found {}",
                manifest.image_count,
                images.len()
            )));
        }
        Ok(Dataset {
            class_names: manifest.classes,
            images,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn img(label: ClassId, id: u64) -> LabeledImage {
        LabeledImage {
            id,
            pixels: Image::filled(4, 4, [0.5, 0.5, 0.5]),
            label,
        }
    }

    #[test]
    fn one_image_per_class() {
        let images: Vec<_> = (0..10).map(|i| img(i, i as u64)).collect();
        let s = validate_dataset(&images, 10).unwrap();
        assert_eq!(s.per_class, vec![1; 10]);
    }

    #[test]
    fn label_at_boundary_is_rejected() {
        let images = vec![img(0, 0), img(10, 1)];
        assert!(matches!(validate_dataset(&images, 10), Err(Error::LabelOutOfRange(1))));
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(matches!(validate_dataset(&[], 3), Err(Error::EmptyDataset)));
        let mut bad = img(0, 0);
        bad.pixels.set(2, 1, 1, f32::NAN);
        assert!(matches!(validate_dataset(&[img(1, 1), bad], 3), Err(Error::NonFinitePixel(1))));
    }

    #[test]
    fn counts_match_direct_tally() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let images: Vec<_> = (0..100)
            .map(|i| {
                let data = (0..3 * 32 * 32).map(|_| rng.gen::<f32>()).collect();
                LabeledImage {
                    id: i,
                    pixels: Image::new(32, 32, data),
                    label: rng.gen_range(0..4),
                }
            })
            .collect();
        let mut tally = [0usize; 4];
        for im in &images {
            tally[im.label as usize] += 1;
        }
        let s = validate_dataset(&images, 4).unwrap();
        assert_eq!(s.per_class, tally.to_vec());
        assert_eq!((s.height, s.width), (32, 32));
    }

    #[test]
    fn half_precision_rows_renormalize() {
        let probs = [0.1f32, 0.2, 0.3, 0.4, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        let s = SoftLabelSet::from_probabilities(2, 4, 1.0, &probs, LabelPrecision::F16).unwrap();
        assert!(s.is_row_stochastic());
        for (a, b) in s.row(0).iter().zip(&probs[..4]) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(s.encoded_len(), 16);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let r = SoftLabelSet::from_probabilities(1, 2, 1.0, &[0.7, 0.7], LabelPrecision::F32);
        assert!(r.is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            class_names: vec!["a".into(), "b".into()],
            images: vec![img(0, 0), img(1, 1), img(1, 2)],
        };
        ds.save_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.summary().unwrap().per_class, vec![1, 2]);
        assert_eq!(back.images.iter().map(|i| i.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
