//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use d3m::data::Dataset;
use d3m::diffusion::{
    train_toy_backend, BackendConfig, BackendTrainConfig, SamplerConfig, ToyBackend, ToyBackendConfig, Vocabulary,
};
use d3m::nn::ConvClassifier;
use d3m::nn::classifier::Arch;
use d3m::toy::{class_names, foundation_corpus, ShapesConfig};
use d3m::trainer::{evaluate, train_on_images, LabelMode, StudentConfig};

/// Sizes of a toy world.
#[derive(Clone, Debug)]
pub struct WorldScale {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub teacher_epochs: usize,
    pub corpus_per_class: usize,
    pub backend_channels: usize,
    pub backend_epochs: usize,
    pub backend_lr: f32,
    pub guidance: f32,
}

impl WorldScale {
    /// The full-size world used by the acceptance suite.
    pub fn full() -> Self {
        Self {
            classes: 4,
            train_per_class: 100,
            test_per_class: 200,
            teacher_epochs: 30,
            corpus_per_class: 200,
            backend_channels: 24,
            backend_epochs: 30,
            backend_lr: 4e-3,
            guidance: 3.0,
        }
    }

    /// A world small enough for ordinary tests.
    pub fn tiny() -> Self {
        Self {
            classes: 3,
            train_per_class: 12,
            test_per_class: 10,
            teacher_epochs: 5,
            corpus_per_class: 16,
            backend_channels: 6,
            backend_epochs: 2,
            backend_lr: 4e-3,
            guidance: 1.0,
        }
    }
}

/// Datasets, teacher and backend written to `dir`, plus their in-memory
/// forms.
pub struct World {
    pub dir: PathBuf,
    pub names: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: ConvClassifier,
    pub teacher_accuracy: f64,
    pub backend: ToyBackend,
}

impl World {
    pub fn train_dir(&self) -> PathBuf {
        self.dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.dir.join("test")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.dir.join("teacher.bin")
    }

    pub fn backend_config(&self) -> PathBuf {
        self.dir.join("backend.toml")
    }

    /// Experiment config with every path filled in and `extra` appended.
    pub fn experiment_toml(&self, out: &Path, extra: &str) -> String {
        format!(
            "data = \"{}\"\ntest_data = \"{}\"\nteacher = \"{}\"\nbackend = \"{}\"\nout_dir = \"{}\"\n{extra}",
            self.train_dir().display(),
            self.test_dir().display(),
            self.teacher_path().display(),
            self.backend_config().display(),
            out.display()
        )
    }
}

pub fn build_world(dir: &Path, scale: &WorldScale) -> World {
    std::fs::create_dir_all(dir).unwrap();
    let shapes = ShapesConfig {
        classes: scale.classes,
        ..Default::default()
    };
    let names = class_names(scale.classes);
    let train = shapes.dataset(scale.train_per_class, 10, 0);
    let test = shapes.dataset(scale.test_per_class, 11, 1_000_000);
    train.save_dir(&dir.join("train")).unwrap();
    test.save_dir(&dir.join("test")).unwrap();

    let tcfg = StudentConfig {
        arch: Arch::ConvPool,
        input: (shapes.size, shapes.size),
        epochs: scale.teacher_epochs,
        ..StudentConfig::for_mode(LabelMode::OneHot)
    };
    let (teacher, _) = train_on_images(&train.images, scale.classes, &tcfg).unwrap();
    teacher.save(&dir.join("teacher.bin")).unwrap();
    let teacher_accuracy = evaluate(&teacher, &test.images).accuracy;

    let corpus = foundation_corpus(
        &shapes,
        scale.corpus_per_class,
        scale.corpus_per_class,
        shapes.size / 2,
        &[(1, 1), (2, 2), (4, 4)],
        3,
    );
    let arch = ToyBackendConfig {
        image_size: shapes.size,
        channels: scale.backend_channels,
        ..Default::default()
    };
    let train_cfg = BackendTrainConfig {
        epochs: scale.backend_epochs,
        lr: scale.backend_lr,
        ..Default::default()
    };
    let (mut backend, _) = train_toy_backend(&corpus, Vocabulary::with_classes(&names), arch, &train_cfg).unwrap();
    let sampler = SamplerConfig {
        guidance: scale.guidance,
        ..Default::default()
    };
    backend.sampler = sampler;
    backend.save(&dir.join("backend.bin")).unwrap();
    let cfg = BackendConfig::Toy {
        checkpoint: "backend.bin".into(),
        sampler,
    };
    std::fs::write(dir.join("backend.toml"), toml::to_string(&cfg).unwrap()).unwrap();

    World {
        dir: dir.to_path_buf(),
        names,
        train,
        test,
        teacher,
        teacher_accuracy,
        backend,
    }
}
