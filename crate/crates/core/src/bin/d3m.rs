use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use d3m::artifact::{ClassEntry, DistilledArtifact};
use d3m::data::{ClassId, Dataset, LabelPrecision};
use d3m::diffusion::{
    train_toy_backend, Backend, BackendConfig, BackendTrainConfig, PromptTemplate, SamplerConfig, ToyBackendConfig,
    Vocabulary,
};
use d3m::inversion::{invert_class, write_loss_csv, InversionConfig};
use d3m::labeler::{make_records, replay, LabelConfig};
use d3m::nn::{Arch, Classifier, ConvClassifier};
use d3m::patch::{build_collages, select_patches, PatchSamplerConfig, Selection};
use d3m::pipeline::{
    pack, read_collages, read_patches, replay_manifest, run_pipeline, train_and_evaluate, write_collages,
    write_patches, ExperimentConfig, RunManifest, StudentStage,
};
use d3m::report::{load_runs, write_report};
use d3m::rng::mix;
use d3m::toy::{class_names, foundation_corpus, ShapesConfig};
use d3m::trainer::{evaluate, train_on_images, LabelMode, StudentConfig};
use d3m::{Error, Result};

#[derive(Parser)]
#[command(name = "d3m", version, about = "Distill image datasets into prompts, seeds and soft labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select one informative patch per training image.
    Patches(PatchesArgs),
    /// Assemble per-class collages from selected patches.
    Collages(CollagesArgs),
    /// Learn a prompt embedding for one class.
    Invert(InvertArgs),
    /// Add seed-pinned generation records (and soft labels) to an artifact.
    Label(LabelArgs),
    /// Merge per-class artifacts into one.
    Pack(PackArgs),
    /// Print an artifact's header and size breakdown as JSON.
    Inspect { artifact: PathBuf },
    /// Regenerate every record of an artifact and print the pixel digests.
    Replay {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        backend: PathBuf,
    },
    /// Train students from an artifact and evaluate them.
    Train(TrainArgs),
    /// Aggregate run records into tables and plots.
    Report(ReportArgs),
    /// Run a whole experiment from a config file.
    Run(RunArgs),
    /// Write a procedural shapes dataset.
    ToyData(ToyDataArgs),
    /// Train a teacher classifier on a dataset directory.
    TrainTeacher(TrainTeacherArgs),
    /// Train the toy diffusion backend and write its config file.
    TrainBackend(TrainBackendArgs),
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once('x').ok_or("expected RxC, e.g. 2x2")?;
    Ok((
        r.trim().parse().map_err(|e| format!("{e}"))?,
        c.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

#[derive(Args)]
struct PatchesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 32)]
    candidates: usize,
    /// Keep the highest-loss crop instead of the lowest.
    #[arg(long)]
    max_loss: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollagesArgs {
    #[arg(long)]
    patches: PathBuf,
    #[arg(long, value_parser = parse_grid, default_value = "2x2")]
    grid: (usize, usize),
    /// Collage side length; defaults to the backend resolution.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    backend: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    collages: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    class: ClassId,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, default_value = "a photo of <S*>")]
    template: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    ipc: usize,
    #[arg(long, value_enum, default_value_t = LabelMode::Soft)]
    mode: LabelMode,
    #[arg(long, default_value_t = 1.0)]
    tau: f32,
    #[arg(long, value_parser = parse_grid, default_value = "2x2")]
    grid: (usize, usize),
    /// Store soft labels as 32-bit floats instead of 16-bit.
    #[arg(long)]
    f32_labels: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; defaults to rewriting the input artifact.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PackArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    backend: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::ConvPool)]
    student: Arch,
    #[arg(long)]
    ipc: usize,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out evaluation set.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Regenerate one-hot training units every E epochs.
    #[arg(long)]
    refresh_every: Option<usize>,
    #[arg(long, default_value = "d3m")]
    label: String,
    #[arg(long, value_enum)]
    teacher_arch: Option<Arch>,
    /// Directory for run records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config.
    #[arg(long, required_unless_present = "replay")]
    config: Option<PathBuf>,
    /// Rerun the experiment recorded in a manifest and check the artifact hash.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<LabelMode>,
    #[arg(long)]
    refresh_every: Option<usize>,
}

#[derive(Args)]
struct ToyDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First image id, so that splits do not share ids.
    #[arg(long, default_value_t = 0)]
    first_id: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::ConvPool)]
    arch: Arch,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Train without flips and random resized crops.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBackendArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Images per class in the training corpus.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    channels: usize,
    #[arg(long, default_value_t = 4e-3)]
    lr: f32,
    /// Classifier-free guidance weight written to the sampler config.
    #[arg(long, default_value_t = 3.0)]
    guidance: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `backend.bin` and `backend.toml`.
    #[arg(long)]
    out: PathBuf,
}

fn load_backend(path: &Path) -> Result<Box<dyn Backend>> {
    BackendConfig::load(path)?.instantiate()
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn patches(a: PatchesArgs) -> Result<()> {
    let data = Dataset::load_dir(&a.data)?;
    let teacher = ConvClassifier::load(&a.teacher)?;
    let mut cfg = PatchSamplerConfig::new(a.patch, a.candidates);
    if a.max_loss {
        cfg.selection = Selection::MaxLoss;
    }
    let p = select_patches(&teacher, &data.images, &cfg, a.seed)?;
    write_patches(&a.out, &p, &data.class_names)?;
    println!("{} patches written to {}", p.values().map(Vec::len).sum::<usize>(), a.out.display());
    Ok(())
}

fn collages(a: CollagesArgs) -> Result<()> {
    let (names, patches) = read_patches(&a.patches)?;
    let (h, w) = match (a.size, &a.backend) {
        (Some(s), _) => (s, s),
        (None, Some(b)) => load_backend(b)?.image_dims(),
        (None, None) => return Err(Error::ConfigInvalid("give --size or --backend".into())),
    };
    let c = build_collages(&patches, a.grid, h, w, a.seed)?;
    write_collages(&a.out, &c, &names)?;
    println!("{} collages written to {}", c.len(), a.out.display());
    Ok(())
}

fn invert(a: InvertArgs) -> Result<()> {
    let backend = load_backend(&a.backend)?;
    let (names, all) = read_collages(&a.collages)?;
    let set: Vec<_> = all.into_iter().filter(|c| c.class_id == a.class).collect();
    let template = PromptTemplate::parse(&a.template)?;
    let d = InversionConfig::default();
    let cfg = InversionConfig {
        steps: a.steps.unwrap_or(d.steps),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed,
        ..d
    };
    let r = invert_class(&*backend, &template, &set, a.class, names.get(a.class as usize).map(String::as_str), &cfg)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact");
    let csv = a.out.with_file_name(format!("{stem}_class{}_loss.csv", a.class));
    write_loss_csv(&csv, &r.losses)?;
    let label = LabelConfig {
        mode: LabelMode::OneHot,
        grid: set.first().map(|c| c.grid).unwrap_or((1, 1)),
        ..Default::default()
    };
    let artifact = pack(
        &*backend,
        &template,
        names.len(),
        &label,
        vec![ClassEntry {
            prompt: r.embedding,
            records: Vec::new(),
        }],
    )?;
    let bytes = artifact.save(&a.out)?;
    println!("class {}: {} bytes to {}, loss curve {}", a.class, bytes, a.out.display(), csv.display());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let backend = load_backend(&a.backend)?;
    let mut artifact = DistilledArtifact::load(&a.artifact)?;
    let teacher = a.teacher.as_deref().map(ConvClassifier::load).transpose()?;
    let cfg = LabelConfig {
        ipc: a.ipc,
        grid: a.grid,
        mode: a.mode,
        temperature: a.tau,
        precision: if a.f32_labels { LabelPrecision::F32 } else { LabelPrecision::F16 },
        base_seed: a.seed,
    };
    let template = artifact.template()?;
    let mut entries = Vec::with_capacity(artifact.classes.len());
    for e in std::mem::take(&mut artifact.classes) {
        let records = make_records(&*backend, &template, &e.prompt, teacher.as_ref().map(|t| t as &dyn Classifier), &cfg)?;
        entries.push(ClassEntry {
            prompt: e.prompt,
            records,
        });
    }
    let out = pack(&*backend, &template, artifact.header.classes, &cfg, entries)?;
    let path = a.out.unwrap_or(a.artifact);
    let bytes = out.save(&path)?;
    println!("{bytes} bytes to {}", path.display());
    Ok(())
}

fn pack_cmd(a: PackArgs) -> Result<()> {
    let mut parts = a.inputs.iter().map(|p| DistilledArtifact::load(p));
    let mut merged = parts.next().expect("clap requires one input")?;
    for p in parts {
        let p = p?;
        if p.header != merged.header {
            return Err(Error::ConfigInvalid("artifacts disagree on header fields".into()));
        }
        merged.classes.extend(p.classes);
    }
    merged.classes.sort_by_key(|c| c.prompt.class_id);
    merged.validate()?;
    let bytes = merged.save(&a.out)?;
    println!("{} classes, {bytes} bytes to {}", merged.classes.len(), a.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct ReplayLine {
    class_id: ClassId,
    record: usize,
    seed: u64,
    sha256: String,
}

fn replay_cmd(artifact: &Path, backend: &Path) -> Result<()> {
    let backend = load_backend(backend)?;
    let a = DistilledArtifact::load(artifact)?;
    let template = a.template()?;
    for e in &a.classes {
        for (i, r) in e.records.iter().enumerate() {
            let (c, _) = replay(&*backend, &template, &e.prompt, r, a.header.grid, a.header.classes, None)?;
            let line = ReplayLine {
                class_id: e.prompt.class_id,
                record: i,
                seed: r.seed,
                sha256: c.pixels.digest_hex(),
            };
            println!("{}", serde_json::to_string(&line)?);
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let backend = load_backend(&a.backend)?;
    let artifact = DistilledArtifact::load(&a.artifact)?;
    let test = Dataset::load_dir(&a.test)?;
    let d = StudentStage::default();
    let stage = StudentStage {
        archs: vec![a.student],
        seeds: a.seeds,
        epochs: a.epochs.unwrap_or(d.epochs),
        refresh_every: a.refresh_every,
        ..d
    };
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| mix(a.seed, &[5, i])).collect();
    let runs = train_and_evaluate(&artifact, &*backend, &test, &stage, a.ipc, &seeds, &a.label, a.teacher_arch)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for r in &runs {
        let p = a
            .out
            .join(format!("{}_{}_{}_ipc{}_{}.json", r.label, r.mode.name(), r.student_arch.name(), r.ipc, r.seed));
        std::fs::write(&p, serde_json::to_vec_pretty(r)?).map_err(|e| Error::io(&p, e))?;
        println!("seed {}: accuracy {:.4}", r.seed, r.accuracy);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let rows = write_report(&load_runs(&a.runs)?, &a.out)?;
    for r in rows {
        println!(
            "{} {} {} ipc {} grid {} bytes {}: {:.2} +- {:.2} (n={})",
            r.label,
            r.mode,
            r.student_arch,
            r.ipc,
            r.grid,
            r.bytes,
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy,
            r.runs
        );
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    if let Some(m) = &a.replay {
        let manifest = RunManifest::load(m)?;
        let out = a.out.clone().unwrap_or_else(|| manifest.config.out_dir.join("replay"));
        let again = replay_manifest(&manifest, &out)?;
        println!("artifact {} reproduced in {}", again.artifact.sha256, out.display());
        return Ok(());
    }
    let path = a.config.as_ref().expect("clap enforces --config");
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(i) = a.ipc {
        cfg.label.ipc = i;
    }
    if let Some(m) = a.mode {
        cfg.label.mode = m;
    }
    if a.refresh_every.is_some() {
        cfg.student.refresh_every = a.refresh_every;
    }
    if a.dry_run {
        cfg.validate()?;
        println!("config {}", cfg.digest());
        for line in cfg.plan() {
            println!("  {line}");
        }
        return Ok(());
    }
    let m = run_pipeline(&cfg)?;
    for s in &m.stages {
        println!("{:<9} {:>8.2}s{}", s.stage, s.seconds, if s.skipped { " (skipped)" } else { "" });
    }
    println!("artifact {} ({} bytes)", m.artifact.sha256, m.artifact.bytes);
    println!("manifest {}", cfg.out_dir.join("manifest.json").display());
    Ok(())
}

fn toy_data(a: ToyDataArgs) -> Result<()> {
    if a.classes == 0 || a.classes > d3m::toy::MAX_CLASSES {
        return Err(Error::ConfigInvalid(format!("classes must be in 1..={}", d3m::toy::MAX_CLASSES)));
    }
    let shapes = ShapesConfig {
        classes: a.classes,
        size: a.size,
        ..Default::default()
    };
    shapes.dataset(a.per_class, a.seed, a.first_id).save_dir(&a.out)?;
    println!("{} images to {}", a.classes * a.per_class, a.out.display());
    Ok(())
}

fn train_teacher(a: TrainTeacherArgs) -> Result<()> {
    let data = Dataset::load_dir(&a.data)?;
    let summary = data.summary()?;
    let cfg = StudentConfig {
        arch: a.arch,
        input: (summary.height, summary.width),
        epochs: a.epochs,
        seed: a.seed,
        augment: !a.no_augment,
        ..StudentConfig::for_mode(LabelMode::OneHot)
    };
    let (model, curve) = train_on_images(&data.images, data.num_classes(), &cfg)?;
    model.save(&a.out)?;
    println!("final loss {:.4}", curve.epoch_losses.last().copied().unwrap_or(f32::NAN));
    if let Some(t) = a.test {
        println!("test accuracy {:.4}", evaluate(&model, &Dataset::load_dir(&t)?.images).accuracy);
    }
    Ok(())
}

fn train_backend(a: TrainBackendArgs) -> Result<()> {
    if a.classes == 0 || a.classes > d3m::toy::MAX_CLASSES {
        return Err(Error::ConfigInvalid(format!("classes must be in 1..={}", d3m::toy::MAX_CLASSES)));
    }
    let shapes = ShapesConfig {
        classes: a.classes,
        ..Default::default()
    };
    let corpus = foundation_corpus(&shapes, a.per_class, a.per_class, shapes.size / 2, &[(1, 1), (2, 2), (4, 4)], a.seed);
    let arch = ToyBackendConfig {
        image_size: shapes.size,
        channels: a.channels,
        ..Default::default()
    };
    let train = BackendTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let (backend, log) = train_toy_backend(&corpus, Vocabulary::with_classes(&class_names(a.classes)), arch, &train)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    backend.save(&a.out.join("backend.bin"))?;
    let cfg = BackendConfig::Toy {
        checkpoint: "backend.bin".into(),
        sampler: SamplerConfig {
            guidance: a.guidance,
            ..Default::default()
        },
    };
    let toml_path = a.out.join("backend.toml");
    let text = toml::to_string(&cfg).map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(&toml_path, text).map_err(|e| Error::io(&toml_path, e))?;
    println!(
        "final loss {:.4}; config {}",
        log.epoch_losses.last().copied().unwrap_or(f32::NAN),
        toml_path.display()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) | Error::InvalidTemplate(_) | Error::UnknownToken(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Patches(a) => patches(a),
        Command::Collages(a) => collages(a),
        Command::Invert(a) => invert(a),
        Command::Label(a) => label(a),
        Command::Pack(a) => pack_cmd(a),
        Command::Inspect { artifact } => DistilledArtifact::load(&artifact).and_then(|a| print_json(&a.inspect())),
        Command::Replay { artifact, backend } => replay_cmd(&artifact, &backend),
        Command::Train(a) => train(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
        Command::ToyData(a) => toy_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::TrainBackend(a) => train_backend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
