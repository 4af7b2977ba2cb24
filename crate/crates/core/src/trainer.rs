//! Student training from regenerated units, and evaluation on real images.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::artifact::DistilledArtifact;
use crate::data::{ClassId, GenerationRecord, LabeledImage};
use crate::diffusion::Backend;
use crate::labeler::replay;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::loss::{argmax, kl_to_target, one_hot};
use crate::nn::{cosine_lr, Arch, Classifier, ConvClassifier, Optimizer, OptimizerKind};
use crate::rng::{mix, rng_for, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    OneHot,
    Soft,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::OneHot => "one_hot",
            LabelMode::Soft => "soft",
        }
    }
}

/// One training example: an image at student resolution and a target
/// distribution over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainUnit {
    pub image: Image,
    pub target: Vec<f32>,
    pub class_id: ClassId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub arch: Arch,
    pub input: (usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub optimizer: OptimizerKind,
    pub loss: LabelMode,
    /// Flips and random resized crops. Only valid with one-hot targets.
    pub augment: bool,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            arch: Arch::ConvPool,
            input: (16, 16),
            epochs: 300,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::adam(),
            loss: LabelMode::Soft,
            augment: false,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn for_mode(loss: LabelMode) -> Self {
        Self {
            loss,
            augment: loss == LabelMode::OneHot,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss == LabelMode::Soft && self.augment {
            return Err(Error::ConfigInvalid(
                "augmentation would invalidate stored soft labels".into(),
            ));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::ConfigInvalid("batch_size and lr must be positive".into()));
        }
        if self.input.0 % 4 != 0 || self.input.1 % 4 != 0 {
            return Err(Error::ConfigInvalid("student input dims must be multiples of 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epoch_losses: Vec<f32>,
}

pub fn init_student(cfg: &StudentConfig, classes: usize) -> ConvClassifier {
    ConvClassifier::new(cfg.arch, cfg.input, classes, &mut rng_for(cfg.seed, &[stream::STUDENT, 0]))
}

const MIN_CROP_AREA: f32 = 0.25;

/// Flip with probability 1/2, then crop a random region covering 25-100% of
/// the area with aspect ratio in [3/4, 4/3] and resize it back.
pub fn augment(img: &Image, rng: &mut Rng) -> Image {
    let img = if rng.gen_bool(0.5) { img.flip_horizontal() } else { img.clone() };
    let (h, w) = img.dims();
    let area = (h * w) as f32 * rng.gen_range(MIN_CROP_AREA..=1.0);
    let ratio = rng.gen_range((0.75f32).ln()..=(4.0f32 / 3.0).ln()).exp();
    let ch = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let cw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    img.crop(top, left, ch, cw).resize(h, w)
}

/// Mutable state of one student run, so that training can continue across
/// changes of the unit set.
pub struct StudentTrainer<'a> {
    cfg: &'a StudentConfig,
    pub model: ConvClassifier,
    opt: Optimizer,
    rng: Rng,
    step: usize,
    total_steps: usize,
    pub curve: LossCurve,
}

impl<'a> StudentTrainer<'a> {
    pub fn new(cfg: &'a StudentConfig, classes: usize, units_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            model: init_student(cfg, classes),
            opt: Optimizer::new(cfg.optimizer, cfg.weight_decay),
            rng: rng_for(cfg.seed, &[stream::STUDENT, 1]),
            step: 0,
            total_steps: units_per_epoch.div_ceil(cfg.batch_size) * cfg.epochs,
            curve: LossCurve::default(),
        })
    }

    pub fn epoch(&mut self, units: &[TrainUnit]) -> Result<f32> {
        if units.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = self.cfg;
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    let x = units[i].image.resize(cfg.input.0, cfg.input.1);
                    if cfg.augment {
                        augment(&x, &mut self.rng)
                    } else {
                        x
                    }
                })
                .collect();
            let batch: Vec<(&Image, &[f32])> = images.iter().zip(chunk).map(|(x, &i)| (x, &units[i].target[..])).collect();
            let (loss, grads) = self.model.batch_gradients(&batch);
            total += loss as f64 * chunk.len() as f64;
            let lr = cosine_lr(cfg.lr, self.step, self.total_steps.max(1));
            self.opt.step(self.model.params_mut(), &grads, lr);
            self.step += 1;
        }
        let mean = (total / units.len() as f64) as f32;
        if !mean.is_finite() {
            return Err(Error::DivergedTraining {
                epoch: self.curve.epoch_losses.len(),
                loss: mean,
            });
        }
        self.curve.epoch_losses.push(mean);
        Ok(mean)
    }
}

/// Minimizes `KL(target || student)` (cross-entropy for one-hot targets).
pub fn train_student(units: &[TrainUnit], cfg: &StudentConfig, classes: usize) -> Result<(ConvClassifier, LossCurve)> {
    let mut t = StudentTrainer::new(cfg, classes, units.len())?;
    for _ in 0..cfg.epochs {
        t.epoch(units)?;
    }
    Ok((t.model, t.curve))
}

/// Regenerates `ipc` units per class from `artifact`. Records are replayed in
/// order and their cells taken row-major; cells past the budget are dropped.
/// `round > 0` replaces each stored seed by `mix(seed, [round])`, which is
/// only meaningful for one-hot artifacts.
pub fn materialize_round(
    artifact: &DistilledArtifact,
    backend: &dyn Backend,
    ipc: usize,
    input: (usize, usize),
    round: u64,
) -> Result<Vec<TrainUnit>> {
    let h = &artifact.header;
    let found = backend.fingerprint();
    if found != h.backend_fingerprint {
        return Err(Error::NonDeterministicBackend {
            expected: hex::encode(h.backend_fingerprint),
            found: hex::encode(found),
        });
    }
    if round > 0 && h.mode == LabelMode::Soft {
        return Err(Error::ConfigInvalid("soft labels are tied to the stored seeds".into()));
    }
    let template = artifact.template()?;
    let cells = artifact.cells();
    let mut units = Vec::with_capacity(ipc * artifact.classes.len());
    for entry in &artifact.classes {
        let available = entry.records.len() * cells;
        if available < ipc {
            return Err(Error::ConfigInvalid(format!(
                "class {} holds {available} cells, {ipc} requested",
                entry.prompt.class_id
            )));
        }
        let mut taken = 0;
        for rec in &entry.records {
            if taken == ipc {
                break;
            }
            let rec = match round {
                0 => rec.clone(),
                r => GenerationRecord {
                    seed: mix(rec.seed, &[r]),
                    soft_labels: None,
                },
            };
            let (collage, labels) = replay(backend, &template, &entry.prompt, &rec, h.grid, h.classes, None)?;
            for (k, target) in labels.into_iter().enumerate().take(ipc - taken) {
                units.push(TrainUnit {
                    image: collage.cell(k).resize(input.0, input.1),
                    target,
                    class_id: entry.prompt.class_id,
                });
                taken += 1;
            }
        }
    }
    Ok(units)
}

pub fn materialize_trainset(
    artifact: &DistilledArtifact,
    backend: &dyn Backend,
    ipc: usize,
    input: (usize, usize),
) -> Result<Vec<TrainUnit>> {
    materialize_round(artifact, backend, ipc, input, 0)
}

/// Trains a student from an artifact. With `refresh_every = Some(e)` the
/// one-hot unit set is regenerated from derived seeds every `e` epochs; the
/// number of optimization steps is unchanged.
pub fn train_from_artifact(
    artifact: &DistilledArtifact,
    backend: &dyn Backend,
    ipc: usize,
    cfg: &StudentConfig,
    refresh_every: Option<usize>,
) -> Result<(ConvClassifier, LossCurve)> {
    if cfg.loss != artifact.header.mode {
        return Err(Error::ConfigInvalid(format!(
            "student loss {} does not match artifact labels {}",
            cfg.loss.name(),
            artifact.header.mode.name()
        )));
    }
    let mut units = materialize_trainset(artifact, backend, ipc, cfg.input)?;
    let mut t = StudentTrainer::new(cfg, artifact.header.classes, units.len())?;
    for epoch in 0..cfg.epochs {
        if let Some(e) = refresh_every.filter(|&e| e > 0 && epoch > 0 && epoch % e == 0) {
            units = materialize_round(artifact, backend, ipc, cfg.input, (epoch / e) as u64)?;
        }
        t.epoch(&units)?;
    }
    Ok((t.model, t.curve))
}

/// Supervised training on labeled images with one-hot targets.
pub fn train_on_images(images: &[LabeledImage], classes: usize, cfg: &StudentConfig) -> Result<(ConvClassifier, LossCurve)> {
    let units: Vec<TrainUnit> = images
        .iter()
        .map(|i| TrainUnit {
            image: i.pixels.clone(),
            target: one_hot(i.label as usize, classes),
            class_id: i.label,
        })
        .collect();
    train_student(&units, cfg, classes)
}

/// Mean `KL(target || model)` over `units`.
pub fn mean_loss(model: &dyn Classifier, units: &[TrainUnit]) -> f32 {
    let s: f64 = units.iter().map(|u| kl_to_target(&model.logits(&u.image), &u.target) as f64).sum();
    (s / units.len().max(1) as f64) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

pub fn predict(model: &dyn Classifier, img: &Image) -> usize {
    let x = match model.input_dims() {
        Some((h, w)) if (h, w) != img.dims() => img.resize(h, w),
        _ => img.clone(),
    };
    argmax(&model.logits(&x))
}

pub fn evaluate(model: &dyn Classifier, test: &[LabeledImage]) -> Evaluation {
    let k = model.num_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    for img in test {
        confusion[img.label as usize][predict(model, &img.pixels)] += 1;
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    Evaluation {
        accuracy: correct as f64 / test.len().max(1) as f64,
        per_class,
        confusion,
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::cross_entropy;
    use crate::toy::ShapesConfig;

    struct Oracle(Vec<(Vec<u8>, usize)>, usize);

    impl Classifier for Oracle {
        fn num_classes(&self) -> usize {
            self.1
        }
        fn input_dims(&self) -> Option<(usize, usize)> {
            None
        }
        fn logits(&self, x: &Image) -> Vec<f32> {
            let d = x.digest().to_vec();
            let c = self.0.iter().find(|(h, _)| *h == d).map(|p| p.1).unwrap_or(0);
            one_hot(c, self.1)
        }
        fn param_digest(&self) -> [u8; 32] {
            [0; 32]
        }
    }

    struct Guesser(usize);

    impl Classifier for Guesser {
        fn num_classes(&self) -> usize {
            self.0
        }
        fn input_dims(&self) -> Option<(usize, usize)> {
            None
        }
        fn logits(&self, x: &Image) -> Vec<f32> {
            let c = x.digest()[0] as usize % self.0;
            one_hot(c, self.0)
        }
        fn param_digest(&self) -> [u8; 32] {
            [0; 32]
        }
    }

    fn test_set() -> Vec<LabeledImage> {
        ShapesConfig::default().dataset(50, 77, 0).images
    }

    #[test]
    fn oracle_scores_one() {
        let t = test_set();
        let o = Oracle(t.iter().map(|i| (i.pixels.digest().to_vec(), i.label as usize)).collect(), 4);
        let e = evaluate(&o, &t);
        assert_eq!(e.accuracy, 1.0);
        assert!(e.per_class.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn guesser_is_near_chance() {
        let t = ShapesConfig::default().dataset(250, 78, 0).images;
        let acc = evaluate(&Guesser(4), &t).accuracy;
        // 1000 draws at p = 0.25: 4 standard deviations is about 0.055.
        assert!((acc - 0.25).abs() < 0.055, "{acc}");
    }

    #[test]
    fn accuracy_matches_direct_tally() {
        let t = test_set();
        let model = init_student(&StudentConfig::default(), 4);
        let e = evaluate(&model, &t);
        let hits = t.iter().filter(|i| argmax(&model.logits(&i.pixels)) == i.label as usize).count();
        assert_eq!(e.accuracy, hits as f64 / t.len() as f64);
        let total: u64 = e.confusion.iter().flatten().sum();
        assert_eq!(total as usize, t.len());
    }

    #[test]
    fn one_hot_kd_equals_ce() {
        let model = init_student(&StudentConfig::default(), 4);
        let img = &test_set()[0];
        let logits = model.logits(&img.pixels);
        let kd = kl_to_target(&logits, &one_hot(img.label as usize, 4));
        assert!((kd - cross_entropy(&logits, img.label as usize)).abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let cfg = StudentConfig {
            epochs: 0,
            ..Default::default()
        };
        let (m, curve) = train_student(&[], &cfg, 4).unwrap();
        assert!(curve.epoch_losses.is_empty());
        assert_eq!(m, init_student(&cfg, 4));
    }

    #[test]
    fn soft_mode_rejects_augmentation() {
        let cfg = StudentConfig {
            loss: LabelMode::Soft,
            augment: true,
            ..Default::default()
        };
        assert!(matches!(train_student(&[], &cfg, 4), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let train = ShapesConfig::default().dataset(20, 5, 0).images;
        let cfg = StudentConfig {
            epochs: 8,
            ..StudentConfig::for_mode(LabelMode::OneHot)
        };
        let (a, ca) = train_on_images(&train, 4, &cfg).unwrap();
        let (b, _) = train_on_images(&train, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ca.epoch_losses.last().unwrap() < &ca.epoch_losses[0]);
    }

    #[test]
    fn augmentation_keeps_dims_and_range() {
        let img = &test_set()[3].pixels;
        let mut rng = rng_for(1, &[]);
        for _ in 0..20 {
            let a = augment(img, &mut rng);
            assert_eq!(a.dims(), img.dims());
            assert!(a.is_valid());
        }
    }

    mod from_artifact {
        use super::*;
        use crate::artifact::{ArtifactHeader, ClassEntry, VERSION};
        use crate::data::{LabelPrecision, PromptEmbedding};
        use crate::diffusion::{PromptTemplate, ScheduleKind, ToyBackend, ToyBackendConfig, Vocabulary};
        use crate::labeler::{make_records, LabelConfig};
        use crate::nn::ConstantClassifier;

        fn backend() -> ToyBackend {
            let cfg = ToyBackendConfig {
                image_size: 8,
                embedding_dim: 12,
                cond_dim: 4,
                channels: 4,
                timesteps: 20,
                schedule: ScheduleKind::Cosine { s: 0.008 },
            };
            ToyBackend::new(cfg, Vocabulary::with_classes(&["disc".into(), "ring".into()]), 1)
        }

        fn artifact(b: &ToyBackend, mode: LabelMode, ipc: usize, grid: (usize, usize)) -> DistilledArtifact {
            let teacher = ConstantClassifier {
                logits: vec![0.0, 1.0, 2.0],
                input: Some((4, 4)),
            };
            let cfg = LabelConfig {
                ipc,
                grid,
                mode,
                precision: LabelPrecision::F32,
                ..Default::default()
            };
            let t = PromptTemplate::photo_of();
            let classes = (0..2u32)
                .map(|c| {
                    let prompt = PromptEmbedding::new(c, b.encoder.embedding(7 + c as usize).to_vec()).unwrap();
                    let records = make_records(b, &t, &prompt, Some(&teacher), &cfg).unwrap();
                    ClassEntry { prompt, records }
                })
                .collect();
            DistilledArtifact {
                header: ArtifactHeader {
                    version: VERSION,
                    mode,
                    precision: LabelPrecision::F32,
                    d: 12,
                    classes: 3,
                    grid,
                    image_dims: (8, 8),
                    temperature: 1.0,
                    backend_fingerprint: b.fingerprint(),
                    template: t.text().into(),
                },
                classes,
            }
        }

        #[test]
        fn single_cell_gives_whole_collage() {
            let b = backend();
            let a = artifact(&b, LabelMode::OneHot, 1, (1, 1));
            let units = materialize_trainset(&a, &b, 1, (4, 4)).unwrap();
            assert_eq!(units.len(), 2);
            let cond = b.condition_placeholder(&PromptTemplate::photo_of(), &a.classes[0].prompt.vector).unwrap();
            let whole = b.generate(a.classes[0].records[0].seed, &cond).unwrap();
            assert_eq!(units[0].image, whole.resize(4, 4));
            assert_eq!(units[1].target, vec![0.0, 1.0, 0.0]);
        }

        #[test]
        fn unit_k_carries_row_k() {
            let b = backend();
            let a = artifact(&b, LabelMode::Soft, 4, (2, 2));
            let units = materialize_trainset(&a, &b, 4, (4, 4)).unwrap();
            assert_eq!(units.len(), 8);
            let rows = a.classes[1].records[0].soft_labels.as_ref().unwrap().to_rows();
            for k in 0..4 {
                assert_eq!(units[4 + k].target, rows[k]);
                assert_eq!(units[4 + k].class_id, 1);
            }
        }

        #[test]
        fn leftover_cells_are_dropped_by_index() {
            let b = backend();
            let a = artifact(&b, LabelMode::OneHot, 10, (2, 2));
            assert_eq!(a.classes[0].records.len(), 3);
            let units = materialize_trainset(&a, &b, 10, (4, 4)).unwrap();
            assert_eq!(units.len(), 20);
            let t = PromptTemplate::photo_of();
            let (last, _) = replay(&b, &t, &a.classes[0].prompt, &a.classes[0].records[2], (2, 2), 3, None).unwrap();
            assert_eq!(units[8].image, last.cell(0).resize(4, 4));
            assert_eq!(units[9].image, last.cell(1).resize(4, 4));
        }

        #[test]
        fn foreign_backend_is_rejected() {
            let b = backend();
            let a = artifact(&b, LabelMode::OneHot, 1, (1, 1));
            let mut other = b.clone();
            other.sampler.steps = 3;
            assert!(matches!(
                materialize_trainset(&a, &other, 1, (4, 4)),
                Err(Error::NonDeterministicBackend { .. })
            ));
        }

        #[test]
        fn refresh_keeps_step_count_and_needs_one_hot() {
            let b = backend();
            let a = artifact(&b, LabelMode::OneHot, 2, (1, 1));
            let cfg = StudentConfig {
                input: (4, 4),
                epochs: 4,
                ..StudentConfig::for_mode(LabelMode::OneHot)
            };
            let (_, curve) = train_from_artifact(&a, &b, 2, &cfg, Some(2)).unwrap();
            assert_eq!(curve.epoch_losses.len(), 4);
            let soft = artifact(&b, LabelMode::Soft, 2, (1, 1));
            let cfg = StudentConfig {
                input: (4, 4),
                epochs: 4,
                ..StudentConfig::for_mode(LabelMode::Soft)
            };
            assert!(train_from_artifact(&soft, &b, 2, &cfg, Some(2)).is_err());
            assert!(train_from_artifact(&soft, &b, 2, &cfg, None).is_ok());
        }
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
