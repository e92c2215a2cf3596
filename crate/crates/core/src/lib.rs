//! Token-indexed memory branch for small decoder-only transformers, with
//! offline folding into ROM-resident lookup tables.

pub mod analysis;
pub mod backbone;
pub mod config;
pub mod error;
pub mod meki;
pub mod numerics;
pub mod reparam;
pub mod storage;
pub mod trainer;

pub use backbone::{ForwardOutput, MekiPath, Model};
pub use config::{FusionStrategy, InjectionPosition, KvMap, ModelConfig, ProjectorKind, Variant};
pub use error::{Error, Result};
pub use reparam::{BankDType, FusedBank, InferenceSession};
pub use trainer::{Corpus, SyntheticCorpusSpec, TrainConfig};
