//! Learned filter pruning for small convolutional networks.
//!
//! A pruning agent looks at one layer's filter matrix and emits a keep
//! probability per filter. Sampled keep/remove decisions are applied by
//! network surgery, the surgered network is briefly fine-tuned and scored,
//! and the agent is trained with REINFORCE on a reward that trades
//! validation accuracy (bounded drop `b`) against the number of filters
//! kept. Whole networks are pruned layer by layer from the input upwards.
//!
//! The crate carries its own small tensor engine with reverse-mode
//! gradients, so everything from convolution kernels to checkpoints is
//! self-contained.

#![allow(clippy::too_many_arguments)]

pub mod agent;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reinforce;
pub mod report;
pub mod reward;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use agent::{AgentArch, AgentConfig, PruningAgent};
pub use autodiff::{Gradients, Graph, Var};
pub use data::{LabeledImageSet, Split};
pub use error::{Error, Result};
pub use model::{ConvUnit, FlopsReport, LayerSpec, ModelGraph, ToyCnnConfig};
pub use optim::{AdamConfig, ParamId, ParamStore};
pub use pipeline::{PruneMethod, PruneOutcome, PruneRunConfig};
pub use reinforce::{RolloutRecord, TrainLog, TrainerConfig};
pub use report::PruneReport;
pub use reward::{RewardBreakdown, RewardConfig};
pub use surgery::ActionVector;
pub use tensor::Tensor;
pub use train::FitConfig;
