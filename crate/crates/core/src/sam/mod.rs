//! Set abstraction module.
//!
//! A shared encoder maps each item's features to a representation. For every
//! nonempty subset of size `k`, a relation network `g_k` is applied to the
//! concatenated member representations, averaged over all member orderings,
//! giving an order-invariant subset representation. A linear classifier and a
//! linear embedding head are applied to each subset representation; a set
//! head `h` maps the sum of all subset representations to the whole-set
//! representation.

mod model;
mod optim;
mod params;
mod tape;
mod train;

use serde::{Deserialize, Serialize};

pub use model::{
    abstraction_representation, backward, class_probabilities, forward_set, gradients, loss, top_k,
    SetAbstractionOutput,
    SubsetOutput,
};
pub use optim::{learning_rate, SgdMomentum};
pub use params::{Layout, Linear, SamParams, CHECKPOINT_VERSION};
pub use tape::{log_sum_exp, softmax, Tape, Var};
pub use train::{train, EpochMetrics, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum SamError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("set of {found} items exceeds the maximum set size {max}")]
    SetTooLarge { max: usize, found: usize },
    #[error("empty input set")]
    EmptySet,
    #[error("no target for subset mask {0:#b}")]
    MissingTarget(u32),
    #[error("target node `{0}` is not in the classifier vocabulary")]
    UnknownClass(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    #[default]
    FullPowerSet,
    /// Singletons and pairs only (relation-network configuration).
    PairsOnly,
}

/// Per-subset training signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Softmax cross-entropy on the abstraction plus embedding regression.
    #[default]
    SetAbstraction,
    /// Softmax cross-entropy only.
    Classification,
    /// Independent sigmoid cross-entropy per vocabulary node; the target
    /// nodes are the positives.
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    pub feature_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::max_set_size")]
    pub max_set_size: usize,
    #[serde(default)]
    pub subset_mode: SubsetMode,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::lr_step_epochs")]
    pub lr_step_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn hidden() -> usize {
        128
    }
    pub fn max_set_size() -> usize {
        4
    }
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn lr_decay() -> f64 {
        0.1
    }
    pub fn lr_step_epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        16
    }
}

impl SamConfig {
    pub fn new(feature_dim: usize) -> Self {
        SamConfig {
            feature_dim,
            hidden: defaults::hidden(),
            max_set_size: defaults::max_set_size(),
            subset_mode: SubsetMode::FullPowerSet,
            objective: Objective::SetAbstraction,
            learning_rate: defaults::learning_rate(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            lr_decay: defaults::lr_decay(),
            lr_step_epochs: defaults::lr_step_epochs(),
            batch_size: defaults::batch_size(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SamError> {
        let bad = |m: String| Err(SamError::InvalidConfig(m));
        if !(1..=4).contains(&self.max_set_size) {
            return bad(format!("max_set_size must be in 1..=4, got {}", self.max_set_size));
        }
        if self.feature_dim == 0 || self.hidden == 0 {
            return bad("feature_dim and hidden must be positive".into());
        }
        if self.batch_size == 0 || self.lr_step_epochs == 0 {
            return bad("batch_size and lr_step_epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return bad("weight_decay must be >= 0 and lr_decay > 0".into());
        }
        Ok(())
    }
}
