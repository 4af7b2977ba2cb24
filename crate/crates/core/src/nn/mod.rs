//! Minimal CPU neural-network toolkit with explicit backward passes.

pub mod classifier;
pub mod layers;
pub mod loss;
pub mod optim;

pub use classifier::{Arch, Classifier, ConstantClassifier, ConvClassifier, LinearProbe};
pub use optim::{cosine_lr, Optimizer, OptimizerKind};
