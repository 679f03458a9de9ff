//! Pairwise learning-to-rank for purchase prediction from purchases and
//! clicks.
//!
//! Every user's catalog splits into purchased, clicked-but-not-purchased and
//! non-clicked items. The P3S objectives learn a factorization model from
//! preference pairs between those sets; BPR, WMF and MostPop are included as
//! baselines, along with the chronological data split and a six-metric
//! ranking evaluation.

pub mod error;
pub mod interactions;
pub mod latent_model;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
pub use interactions::{
    build_log, enforce_click_closure, filter_users, partition, Dataset, Event, EventKind, InteractionLog, RawEvent,
    TriPartition,
};
pub use latent_model::{HyperParams, Method, ModelParams};
pub use metrics::{evaluate, EvalReport, MetricMeans};
pub use pipeline::{
    chronological_split, generate_synthetic, load_checkpoint, save_checkpoint, SplitConfig, SynthConfig,
};
pub use trainer::{grid_search, train, GridSpec, SamplesPerEpoch, SamplingMode, TrainConfig};
