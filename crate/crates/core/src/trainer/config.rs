use serde::{Deserialize, Serialize};

use crate::error::{OanError, Result};
use crate::losses::{HypersphereKernel, InterClassLossConfig, LossWeights};

/// Everything that determines a training run besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights<f64>,
    pub enable_se: bool,
    pub enable_in: bool,
    pub enable_s_hcr: bool,
    pub enable_t_hcr: bool,
    pub beta: f64,
    pub eta: f64,
    pub literal_coefficients: bool,
    /// Key momentum `w`.
    pub momentum: f64,
    /// Teacher softmax temperature.
    pub tau: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Number of semantic labels M (teacher and logit-head width).
    pub semantic_dim: usize,
    pub num_unseen: usize,
    pub teacher_epochs: usize,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 1,
            weights: LossWeights::default(),
            enable_se: true,
            enable_in: true,
            enable_s_hcr: true,
            enable_t_hcr: false,
            beta: 10.0,
            eta: 0.1,
            literal_coefficients: false,
            momentum: crate::memory::DEFAULT_MOMENTUM,
            tau: 1.0,
            hidden: 128,
            embed_dim: 64,
            semantic_dim: 10,
            num_unseen: 5,
            teacher_epochs: 3,
            eval_ks: vec![10, 50],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(OanError::config("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(OanError::config("batch_size must be >= 2 (pairwise losses need pairs)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OanError::config("learning_rate must be finite and >= 0"));
        }
        if !(self.tau > 0.0) {
            return Err(OanError::config("tau must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(OanError::config("momentum must be in [0, 1]"));
        }
        if self.embed_dim < 2 || self.hidden == 0 || self.semantic_dim == 0 {
            return Err(OanError::config("hidden, semantic_dim >= 1 and embed_dim >= 2 required"));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(OanError::config("eval_ks must be non-empty with entries >= 1"));
        }
        self.weights.validate()?;
        self.inter_class().validate()
    }

    pub fn inter_class(&self) -> InterClassLossConfig<f64> {
        InterClassLossConfig {
            beta: self.beta,
            eta: self.eta,
            literal_coefficients: self.literal_coefficients,
        }
    }

    pub fn kernel(&self) -> HypersphereKernel<f64> {
        HypersphereKernel::default()
    }
}

/// One row of the loss-term ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub enable_in: bool,
    pub enable_t_hcr: bool,
    pub enable_s_hcr: bool,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mut parts = vec!["baseline"];
        if self.enable_in {
            parts.push("L_in");
        }
        if self.enable_t_hcr {
            parts.push("L_T_hcr");
        }
        if self.enable_s_hcr {
            parts.push("L_S_hcr");
        }
        parts.join(" + ")
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            enable_in: self.enable_in,
            enable_t_hcr: self.enable_t_hcr,
            enable_s_hcr: self.enable_s_hcr,
            ..cfg.clone()
        }
    }
}

/// The six loss combinations of the ablation table, in table order.
pub const ABLATION_GRID: [AblationRow; 6] = [
    AblationRow { enable_in: false, enable_t_hcr: false, enable_s_hcr: false },
    AblationRow { enable_in: false, enable_t_hcr: false, enable_s_hcr: true },
    AblationRow { enable_in: true, enable_t_hcr: false, enable_s_hcr: false },
    AblationRow { enable_in: true, enable_t_hcr: true, enable_s_hcr: false },
    AblationRow { enable_in: true, enable_t_hcr: false, enable_s_hcr: true },
    AblationRow { enable_in: true, enable_t_hcr: true, enable_s_hcr: true },
];
