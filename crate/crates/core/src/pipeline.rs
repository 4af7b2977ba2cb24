//! Experiment configs, the end-to-end run, and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{ArtifactHeader, ClassEntry, DistilledArtifact, VERSION};
use crate::data::{ClassId, Collage, Dataset, LabelPrecision, Patch, PromptEmbedding};
use crate::diffusion::{Backend, BackendConfig, PromptTemplate};
use crate::error::{Error, Result};
use crate::inversion::{baseline_embedding, invert_class, write_loss_csv, EmbeddingInit, InversionConfig, BASELINE_PROMPT};
use crate::labeler::{make_records, LabelConfig};
use crate::nn::{Arch, Classifier, ConvClassifier, OptimizerKind};
use crate::patch::{build_collages, select_patches, PatchSamplerConfig, Sampling, Selection};
use crate::report::{write_report, RunRecord};
use crate::rng::mix;
use crate::trainer::{evaluate, train_from_artifact, LabelMode, StudentConfig};

pub const STAGES: [&str; 7] = ["patches", "collages", "invert", "label", "pack", "train", "report"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// One learned embedding per class.
    #[default]
    Inverted,
    /// Hand-written prompt with the class name; no patches, collages or
    /// inversion.
    Engineered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptStage {
    pub source: PromptSource,
    /// Template used for inversion and generation.
    pub template: String,
    /// Engineered prompt, `{}` marks the class name.
    pub engineered: String,
}

impl Default for PromptStage {
    fn default() -> Self {
        Self {
            source: PromptSource::Inverted,
            template: "a photo of <S*>".into(),
            engineered: BASELINE_PROMPT.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchStage {
    pub size: usize,
    pub candidates: usize,
    pub sampling: Sampling,
    pub selection: Selection,
    /// Collage grid used for inversion.
    pub grid: (usize, usize),
}

impl Default for PatchStage {
    fn default() -> Self {
        Self {
            size: 8,
            candidates: 32,
            sampling: Sampling::UniformRandom,
            selection: Selection::MinLoss,
            grid: (2, 2),
        }
    }
}

impl PatchStage {
    pub fn sampler(&self) -> PatchSamplerConfig {
        PatchSamplerConfig {
            n_candidates: self.candidates,
            patch_h: self.size,
            patch_w: self.size,
            sampling: self.sampling,
            selection: self.selection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionStage {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub init: EmbeddingInit,
}

impl Default for InversionStage {
    fn default() -> Self {
        let d = InversionConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            batch_size: d.batch_size,
            optimizer: d.optimizer,
            init: d.init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelStage {
    pub ipc: usize,
    pub grid: (usize, usize),
    pub mode: LabelMode,
    pub temperature: f32,
    pub precision: LabelPrecision,
}

impl Default for LabelStage {
    fn default() -> Self {
        let d = LabelConfig::default();
        Self {
            ipc: d.ipc,
            grid: d.grid,
            mode: d.mode,
            temperature: d.temperature,
            precision: d.precision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentStage {
    pub archs: Vec<Arch>,
    /// Number of repetitions per architecture.
    pub seeds: usize,
    pub input: (usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Defaults to on for one-hot labels and off for soft labels.
    pub augment: Option<bool>,
    pub refresh_every: Option<usize>,
}

impl Default for StudentStage {
    fn default() -> Self {
        let d = StudentConfig::default();
        Self {
            archs: vec![Arch::ConvPool],
            seeds: 3,
            input: d.input,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            augment: None,
            refresh_every: None,
        }
    }
}

impl StudentStage {
    pub fn config(&self, arch: Arch, mode: LabelMode, seed: u64) -> StudentConfig {
        StudentConfig {
            arch,
            input: self.input,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            loss: mode,
            augment: self.augment.unwrap_or(mode == LabelMode::OneHot),
            seed,
            ..StudentConfig::for_mode(mode)
        }
    }
}

/// One experiment. Relative paths resolve against the config file's
/// directory. All stage seeds derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Training images (dataset directory with `manifest.json`).
    pub data: PathBuf,
    /// Held-out images for evaluation.
    pub test_data: PathBuf,
    /// Teacher checkpoint; needed for patch scoring and soft labels.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Backend config file.
    pub backend: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub prompt: PromptStage,
    #[serde(default)]
    pub patches: PatchStage,
    #[serde(default)]
    pub inversion: InversionStage,
    #[serde(default)]
    pub label: LabelStage,
    #[serde(default)]
    pub student: StudentStage,
}

fn default_name() -> String {
    "d3m".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.test_data, &mut self.backend, &mut self.out_dir] {
            *p = base.join(&*p);
        }
        if let Some(t) = &mut self.teacher {
            *t = base.join(&*t);
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.prompt.source == PromptSource::Inverted || self.label.mode == LabelMode::Soft
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = self.seed;
        StageSeeds {
            patches: mix(s, &[1]),
            collages: mix(s, &[2]),
            inversion: mix(s, &[3]),
            label: mix(s, &[4]),
            students: (0..self.student.seeds as u64).map(|i| mix(s, &[5, i])).collect(),
        }
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            ipc: self.label.ipc,
            grid: self.label.grid,
            mode: self.label.mode,
            temperature: self.label.temperature,
            precision: self.label.precision,
            base_seed: self.seeds().label,
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig {
            steps: self.inversion.steps,
            lr: self.inversion.lr,
            batch_size: self.inversion.batch_size,
            optimizer: self.inversion.optimizer,
            init: self.inversion.init,
            seed: self.seeds().inversion,
        }
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<()> {
        let missing = |what: &str, p: &Path| Error::ConfigInvalid(format!("{what} not found: {}", p.display()));
        if !self.data.join("manifest.json").is_file() {
            return Err(missing("training data manifest", &self.data.join("manifest.json")));
        }
        if !self.test_data.join("manifest.json").is_file() {
            return Err(missing("test data manifest", &self.test_data.join("manifest.json")));
        }
        if self.needs_teacher() {
            match &self.teacher {
                None => return Err(Error::ConfigInvalid("this experiment needs a teacher checkpoint".into())),
                Some(t) if !t.is_file() => return Err(missing("teacher checkpoint", t)),
                _ => {}
            }
        }
        if !self.backend.is_file() {
            return Err(missing("backend config", &self.backend));
        }
        match BackendConfig::load(&self.backend)? {
            BackendConfig::Toy { checkpoint, .. } if !checkpoint.is_file() => {
                return Err(missing("backend checkpoint", &checkpoint))
            }
            _ => {}
        }
        PromptTemplate::parse(&self.prompt.template).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        if !self.prompt.engineered.contains("{}") {
            return Err(Error::ConfigInvalid("engineered prompt needs a {} slot".into()));
        }
        self.label_config().validate()?;
        self.inversion_config().validate()?;
        if self.student.archs.is_empty() || self.student.seeds == 0 {
            return Err(Error::ConfigInvalid("student needs at least one arch and one seed".into()));
        }
        for &arch in &self.student.archs {
            self.student.config(arch, self.label.mode, 0).validate()?;
        }
        if self.label.mode == LabelMode::Soft && self.student.refresh_every.is_some() {
            return Err(Error::ConfigInvalid("refresh is only available for one-hot labels".into()));
        }
        Ok(())
    }

    /// Human-readable description of what `run` would do.
    pub fn plan(&self) -> Vec<String> {
        let seeds = self.seeds();
        let inverted = self.prompt.source == PromptSource::Inverted;
        let skip = |s: &str| format!("{s}: skipped (engineered prompt)");
        vec![
            if inverted {
                format!(
                    "patches: {}x{} crops, {} candidates, seed {}",
                    self.patches.size, self.patches.size, self.patches.candidates, seeds.patches
                )
            } else {
                skip("patches")
            },
            if inverted {
                format!("collages: grid {}, seed {}", crate::report::grid_name(self.patches.grid), seeds.collages)
            } else {
                skip("collages")
            },
            if inverted {
                format!(
                    "invert: {} steps, lr {}, template {:?}, seed {}",
                    self.inversion.steps, self.inversion.lr, self.prompt.template, seeds.inversion
                )
            } else {
                skip("invert")
            },
            format!(
                "label: ipc {}, grid {}, mode {}, tau {}, base seed {}",
                self.label.ipc,
                crate::report::grid_name(self.label.grid),
                self.label.mode.name(),
                self.label.temperature,
                seeds.label
            ),
            format!("pack: {}", self.out_dir.join("artifact.d3m").display()),
            format!(
                "train: archs {:?}, {} seeds, {} epochs",
                self.student.archs.iter().map(|a| a.name()).collect::<Vec<_>>(),
                self.student.seeds,
                self.student.epochs
            ),
            format!("report: {}", self.out_dir.join("report").display()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub patches: u64,
    pub collages: u64,
    pub inversion: u64,
    pub label: u64,
    pub students: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactInfo {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seeds: StageSeeds,
    pub teacher_sha256: Option<String>,
    pub backend_fingerprint: String,
    pub artifact: ArtifactInfo,
    pub stages: Vec<StageTiming>,
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }
}

fn stage_err(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::StageFailed { .. } => e,
        cause => Error::StageFailed {
            stage: stage.to_string(),
            cause: Box::new(cause),
        },
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub file: String,
    pub image_id: u64,
    pub class_id: ClassId,
    pub top: usize,
    pub left: usize,
    pub score: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub class_names: Vec<String>,
    pub patches: Vec<PatchIndexEntry>,
}

/// Writes `<dir>/<class>/<image id>.png` and `<dir>/index.json`.
pub fn write_patches(dir: &Path, patches: &BTreeMap<ClassId, Vec<Patch>>, names: &[String]) -> Result<()> {
    let mut index = PatchIndex {
        class_names: names.to_vec(),
        patches: Vec::new(),
    };
    for (&c, list) in patches {
        let sub = dir.join(&names[c as usize]);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for p in list {
            let file = format!("{}/{:06}.png", names[c as usize], p.source_image_id);
            p.pixels.save_png(&dir.join(&file))?;
            index.patches.push(PatchIndexEntry {
                file,
                image_id: p.source_image_id,
                class_id: c,
                top: p.top,
                left: p.left,
                score: p.score,
            });
        }
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

/// Inverse of [`write_patches`]. Pixels pass through 8-bit PNG.
pub fn read_patches(dir: &Path) -> Result<(Vec<String>, BTreeMap<ClassId, Vec<Patch>>)> {
    let path = dir.join("index.json");
    let index: PatchIndex =
        serde_json::from_str(&crate::audit::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let mut out: BTreeMap<ClassId, Vec<Patch>> = BTreeMap::new();
    for e in index.patches {
        out.entry(e.class_id).or_default().push(Patch {
            pixels: crate::image::Image::load(&dir.join(&e.file))?,
            source_image_id: e.image_id,
            top: e.top,
            left: e.left,
            score: e.score,
        });
    }
    Ok((index.class_names, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollageIndexEntry {
    pub file: String,
    pub class_id: ClassId,
    pub grid: (usize, usize),
    pub cells: Vec<crate::data::CellSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollageIndex {
    pub class_names: Vec<String>,
    pub collages: Vec<CollageIndexEntry>,
}

/// Writes `<dir>/<class>_<k>.png` for every collage plus `<dir>/index.json`.
pub fn write_collages(dir: &Path, collages: &[Collage], names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut index = CollageIndex {
        class_names: names.to_vec(),
        collages: Vec::new(),
    };
    for c in collages {
        let k = counts.entry(c.class_id).or_default();
        let file = format!("{}_{:04}.png", names[c.class_id as usize], k);
        c.pixels.save_png(&dir.join(&file))?;
        *k += 1;
        index.collages.push(CollageIndexEntry {
            file,
            class_id: c.class_id,
            grid: c.grid,
            cells: c.cells.clone(),
        });
    }
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

/// Inverse of [`write_collages`]. Pixels pass through 8-bit PNG.
pub fn read_collages(dir: &Path) -> Result<(Vec<String>, Vec<Collage>)> {
    let path = dir.join("index.json");
    let index: CollageIndex =
        serde_json::from_str(&crate::audit::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let collages = index
        .collages
        .into_iter()
        .map(|e| Collage::new(crate::image::Image::load(&dir.join(&e.file))?, e.grid, e.cells, e.class_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((index.class_names, collages))
}

/// Inverts every class present in `collages`.
pub fn invert_all(
    backend: &dyn Backend,
    template: &PromptTemplate,
    collages: &[Collage],
    names: &[String],
    cfg: &InversionConfig,
    loss_dir: Option<&Path>,
) -> Result<Vec<PromptEmbedding>> {
    let mut by_class: BTreeMap<ClassId, Vec<Collage>> = BTreeMap::new();
    for c in collages {
        by_class.entry(c.class_id).or_default().push(c.clone());
    }
    let mut out = Vec::with_capacity(by_class.len());
    for (c, set) in by_class {
        let name = names.get(c as usize).map(String::as_str);
        let r = invert_class(backend, template, &set, c, name, cfg)?;
        log::info!(
            "class {c}: loss {:.4} -> {:.4}",
            r.losses.first().copied().unwrap_or(f32::NAN),
            crate::inversion::smoothed(&r.losses, 50).last().copied().unwrap_or(f32::NAN)
        );
        if let Some(dir) = loss_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_loss_csv(&dir.join(format!("class_{c}_loss.csv")), &r.losses)?;
        }
        out.push(r.embedding);
    }
    Ok(out)
}

/// Assembles an artifact from per-class prompts and their records.
pub fn pack(
    backend: &dyn Backend,
    template: &PromptTemplate,
    classes: usize,
    label: &LabelConfig,
    entries: Vec<ClassEntry>,
) -> Result<DistilledArtifact> {
    let a = DistilledArtifact {
        header: ArtifactHeader {
            version: VERSION,
            mode: label.mode,
            precision: label.precision,
            d: backend.embedding_dim(),
            classes,
            grid: label.grid,
            image_dims: backend.image_dims(),
            temperature: label.temperature,
            backend_fingerprint: backend.fingerprint(),
            template: template.text().to_string(),
        },
        classes: entries,
    };
    a.validate()?;
    Ok(a)
}

/// Trains `seeds.len()` students per architecture and evaluates each on
/// `test`.
#[allow(clippy::too_many_arguments)]
pub fn train_and_evaluate(
    artifact: &DistilledArtifact,
    backend: &dyn Backend,
    test: &Dataset,
    stage: &StudentStage,
    ipc: usize,
    seeds: &[u64],
    label: &str,
    teacher_arch: Option<Arch>,
) -> Result<Vec<RunRecord>> {
    let bytes = artifact.account().total;
    let sha = hex::encode(artifact.digest()?);
    let mut runs = Vec::new();
    for &arch in &stage.archs {
        for &seed in seeds {
            let cfg = stage.config(arch, artifact.header.mode, seed);
            let (model, _) = train_from_artifact(artifact, backend, ipc, &cfg, stage.refresh_every)?;
            let ev = evaluate(&model, &test.images);
            log::info!("{label} {} seed {seed}: accuracy {:.4}", arch.name(), ev.accuracy);
            runs.push(RunRecord {
                label: label.to_string(),
                mode: artifact.header.mode,
                teacher_arch,
                student_arch: arch,
                ipc,
                grid: artifact.header.grid,
                seed,
                accuracy: ev.accuracy,
                per_class: ev.per_class,
                bytes,
                artifact_sha256: sha.clone(),
            });
        }
    }
    Ok(runs)
}

struct Timer {
    stages: Vec<StageTiming>,
}

impl Timer {
    fn run<T>(&mut self, stage: &str, skipped: bool, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().map_err(stage_err(stage))?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
            skipped,
        });
        Ok(out)
    }
}

/// Runs every stage and writes `<out_dir>/manifest.json`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seeds = cfg.seeds();
    let backend = BackendConfig::load(&cfg.backend)?.instantiate().map_err(stage_err("setup"))?;
    let teacher = match (&cfg.teacher, cfg.needs_teacher()) {
        (Some(p), true) => Some(ConvClassifier::load(p).map_err(stage_err("setup"))?),
        _ => None,
    };
    let teacher_dyn = teacher.as_ref().map(|t| t as &dyn Classifier);
    let train = Dataset::load_dir(&cfg.data).map_err(stage_err("setup"))?;
    let names = train.class_names.clone();
    let inverted = cfg.prompt.source == PromptSource::Inverted;
    let mut timer = Timer { stages: Vec::new() };

    let patches = timer.run("patches", !inverted, || {
        if !inverted {
            return Ok(BTreeMap::new());
        }
        let teacher = teacher_dyn.expect("validated");
        let p = select_patches(teacher, &train.images, &cfg.patches.sampler(), seeds.patches)?;
        write_patches(&out.join("patches"), &p, &names)?;
        Ok(p)
    })?;
    drop(train);

    let collages = timer.run("collages", !inverted, || {
        if !inverted {
            return Ok(Vec::new());
        }
        let (h, w) = backend.image_dims();
        let c = build_collages(&patches, cfg.patches.grid, h, w, seeds.collages)?;
        write_collages(&out.join("collages"), &c, &names)?;
        Ok(c)
    })?;

    let (template, prompts) = timer.run("invert", !inverted, || {
        if inverted {
            let template = PromptTemplate::parse(&cfg.prompt.template)?;
            let prompts = invert_all(
                &*backend,
                &template,
                &collages,
                &names,
                &cfg.inversion_config(),
                Some(&out.join("inversion")),
            )?;
            Ok((template, prompts))
        } else {
            let mut template = None;
            let mut prompts = Vec::new();
            for (c, name) in names.iter().enumerate() {
                let (t, e) = baseline_embedding(&*backend, c as ClassId, name, &cfg.prompt.engineered)?;
                template = Some(t);
                prompts.push(e);
            }
            Ok((template.ok_or(Error::EmptyDataset)?, prompts))
        }
    })?;

    let label_cfg = cfg.label_config();
    let entries = timer.run("label", false, || {
        prompts
            .iter()
            .map(|p| {
                let records = make_records(&*backend, &template, p, teacher_dyn, &label_cfg)?;
                Ok(ClassEntry {
                    prompt: p.clone(),
                    records,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let artifact_path = out.join("artifact.d3m");
    let (artifact, info) = timer.run("pack", false, || {
        let a = pack(&*backend, &template, names.len(), &label_cfg, entries)?;
        let bytes = a.save(&artifact_path)? as usize;
        let info = ArtifactInfo {
            path: artifact_path.clone(),
            sha256: file_sha256(&artifact_path)?,
            bytes,
        };
        Ok((a, info))
    })?;

    let runs = timer.run("train", false, || {
        let test = Dataset::load_dir(&cfg.test_data)?;
        let runs = train_and_evaluate(
            &artifact,
            &*backend,
            &test,
            &cfg.student,
            cfg.label.ipc,
            &seeds.students,
            &cfg.name,
            teacher.as_ref().map(|t| t.arch()),
        )?;
        let dir = out.join("runs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for r in &runs {
            let p = dir.join(format!("{}_{}_{}_{}.json", r.label, r.mode.name(), r.student_arch.name(), r.seed));
            std::fs::write(&p, serde_json::to_vec_pretty(r)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(runs)
    })?;

    timer.run("report", false, || write_report(&runs, &out.join("report")).map(|_| ()))?;

    let manifest = RunManifest {
        config: cfg.clone(),
        config_sha256: cfg.digest(),
        seeds,
        teacher_sha256: match (&cfg.teacher, teacher.is_some()) {
            (Some(p), true) => Some(file_sha256(p)?),
            _ => None,
        },
        backend_fingerprint: hex::encode(backend.fingerprint()),
        artifact: info,
        stages: timer.stages,
        runs,
    };
    let mpath = out.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reruns the experiment recorded in `manifest` into `out_dir` and checks
/// that the artifact hash is reproduced.
pub fn replay_manifest(manifest: &RunManifest, out_dir: &Path) -> Result<RunManifest> {
    let mut cfg = manifest.config.clone();
    cfg.out_dir = out_dir.to_path_buf();
    if cfg.digest() == manifest.config_sha256 {
        return Err(Error::ConfigInvalid("replay must write to a different directory".into()));
    }
    let again = run_pipeline(&cfg)?;
    if again.artifact.sha256 != manifest.artifact.sha256 {
        return Err(Error::StageFailed {
            stage: "replay".into(),
            cause: Box::new(Error::NonDeterministicBackend {
                expected: manifest.artifact.sha256.clone(),
                found: again.artifact.sha256,
            }),
        });
    }
    Ok(again)
}
