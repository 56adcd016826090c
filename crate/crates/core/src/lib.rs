//! Asymmetric LoRA adapters: one shared down-projection `A`, several
//! routed up-projections `B`, and the tooling around them (a tiny autodiff
//! engine, toy base models, corpus clustering to choose the expert count,
//! training harnesses and post-hoc analysis).

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod corpus;
pub mod error;
pub mod linalg;
pub mod model;
pub mod params;
pub mod trainer;

pub use adapters::{
    Adapter, AdapterConfig, GateOutput, HydraAdapter, LoraAdapter, Scheme, SplitAdapter,
};
pub use analysis::{breakdown, cost, CostDims, CostReport, CostSpec, EmbeddingReport, Separation};
pub use autodiff::{grad_check, GradReport, Gradients, LeafKind, SlotId, Tape};
pub use checkpoint::Checkpoint;
pub use clustering::{
    elbow_select, init_hydra_from_corpus, kmeans, sse_curve, ClusterReport, KMeansResult, SseCurve,
};
pub use corpus::{Corpus, Document, TfIdfModel};
pub use error::{Error, Result};
pub use linalg::{Matrix, SeededRng};
pub use model::{Batch, ModelSpec, ToyModel};
pub use params::{param_count, ParamCount, ParamQuery};
pub use trainer::{train, TrainConfig, TrainData, TrainOptions, TrainReport, TrainScheme};
