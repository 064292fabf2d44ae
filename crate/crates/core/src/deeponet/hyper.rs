use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};

/// Network and optimizer settings. Defaults are the selected simulation
/// configuration: 128 nodes, 16 filters, pool 8, lr 1e-3, batch 1000, m 250, p 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Width of every hidden dense layer (branch and trunk).
    pub nodes: usize,
    /// Filters in each causal convolution (CNN branch).
    pub filters: usize,
    pub kernel_width: usize,
    /// Max-pool size; the stride equals it.
    pub pool: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of grid intervals, which is also the number of sensors.
    pub m: usize,
    /// Shared output dimension of branch and trunk.
    pub p: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Hidden dense layers in the branch: 2 for FNN and 1 after the
    /// convolutions for CNN when unset.
    pub branch_hidden_layers: Option<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            nodes: 128,
            filters: 16,
            kernel_width: 8,
            pool: 8,
            learning_rate: 1e-3,
            batch_size: 1000,
            m: 250,
            p: 10,
            patience: 10,
            max_epochs: 500,
            branch_hidden_layers: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("nodes", self.nodes),
            ("filters", self.filters),
            ("kernel_width", self.kernel_width),
            ("pool", self.pool),
            ("batch_size", self.batch_size),
            ("m", self.m),
            ("p", self.p),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SurvError::Config(format!("hyperparameter `{name}` must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SurvError::Config("learning_rate must be positive".into()));
        }
        if self.branch_hidden_layers == Some(0) {
            return Err(SurvError::Config("branch_hidden_layers must be positive".into()));
        }
        Ok(())
    }
}

/// Input geometry of a network: `m` sensors of `tv_dim` time-varying covariates
/// plus `ti_dim` static covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputDims {
    pub m: usize,
    pub tv_dim: usize,
    pub ti_dim: usize,
}

impl InputDims {
    pub fn history_width(&self) -> usize {
        self.m * self.tv_dim
    }
}
