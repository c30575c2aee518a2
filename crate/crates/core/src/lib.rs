//! Desk-scale unified image/video-language model: encoders, decoders, objectives, training and evaluation.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generate;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod oracles;
pub mod params;
pub mod settings;
pub mod text;
pub mod trainer;
pub mod visual;

pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use corpus::{Corpus, Modality, Triplet};
pub use objectives::{Label, LossWeights};
pub use params::ParamStore;
pub use settings::RunSettings;
pub use text::Vocabulary;
pub use trainer::{Paradigm, ScheduleConfig, TrainConfig, TrainState, Trainer};
