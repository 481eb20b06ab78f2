//! Unsupervised domain adaptation over feature vectors with two structurally
//! different classifiers.
//!
//! A shared generator embeds source and target features. A neural classifier
//! and a parameter-free prototypical classifier both learn from labelled
//! source data; their disagreement on target data is first maximized by the
//! neural classifier and then minimized by the generator, alongside
//! class-mean alignment of confident target samples and entropy minimization.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff::Graph`]) over dense `f64` matrices.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod proto;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use config::{Ablation, TrainConfig};
pub use data::{gen_shifted_gaussians, BatchIterator, Dataset, Domain, Format, ShiftTask};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use matrix::Matrix;
pub use metrics::{evaluate, pca_project, EvalReport};
pub use nn::{Adam, Generator, NetDims, NeuralClassifier};
pub use proto::Prototypes;
pub use trainer::{train, train_with, LogRecord, TrainState};
