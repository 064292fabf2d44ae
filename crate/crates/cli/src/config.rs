//! Experiment configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use opsurv::deeponet::HyperParams;
use opsurv::simgen::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Method for single-model commands.
    pub method: String,
    /// Methods compared by `replicate` and `cv`.
    pub methods: Vec<String>,
    /// Grid horizon; the largest training event time when unset.
    pub tau: Option<f64>,
    /// Longitudinal CSV input; simulated data is used when unset.
    pub data: Option<PathBuf>,
    /// Model file for `predict`, `evaluate` and `contrast`.
    pub model: Option<PathBuf>,
    pub replications: usize,
    pub covariate_sets: usize,
    /// Share of a training sample held out for early stopping.
    pub validation_fraction: f64,
    /// Position of the binary treatment among the static covariates.
    pub treatment_index: usize,
    pub sim: SimConfig,
    pub hyper: HyperParams,
    pub eval: EvalConfig,
    pub ingest: IngestConfig,
    pub tuning: TuningGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("out"),
            method: "deeponet-cnn".into(),
            methods: vec!["deeponet-fnn".into(), "deeponet-cnn".into(), "cox".into()],
            tau: None,
            data: None,
            model: None,
            replications: 10,
            covariate_sets: 9,
            validation_fraction: 0.2,
            treatment_index: 0,
            sim: SimConfig::default(),
            hyper: HyperParams::default(),
            eval: EvalConfig::default(),
            ingest: IngestConfig::default(),
            tuning: TuningGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Quantile of observed test times used as the IBS upper limit.
    pub ibs_quantile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            ibs_quantile: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Visit times are snapped to multiples of this step when set.
    pub grid_step: Option<f64>,
    pub tv_columns: Vec<String>,
    pub ti_columns: Vec<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            grid_step: None,
            tv_columns: vec!["x".into()],
            ti_columns: vec!["z".into(), "w".into()],
        }
    }
}

/// Candidate values searched by `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningGrid {
    pub nodes: Vec<usize>,
    pub filters: Vec<usize>,
    pub pool: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub m: Vec<usize>,
    pub p: Vec<usize>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            nodes: vec![32, 64, 128, 256],
            filters: vec![16, 32, 64],
            pool: vec![4, 8],
            learning_rate: vec![0.01, 0.001, 0.0001],
            batch_size: vec![100, 500, 1000],
            m: vec![100, 200, 300, 400, 500],
            p: vec![10],
        }
    }
}

impl TuningGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
            * self.filters.len()
            * self.pool.len()
            * self.learning_rate.len()
            * self.batch_size.len()
            * self.m.len()
            * self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination, applied on top of `base`.
    pub fn combinations(&self, base: &HyperParams) -> Vec<HyperParams> {
        let mut out = Vec::with_capacity(self.len());
        for &nodes in &self.nodes {
            for &filters in &self.filters {
                for &pool in &self.pool {
                    for &learning_rate in &self.learning_rate {
                        for &batch_size in &self.batch_size {
                            for &m in &self.m {
                                for &p in &self.p {
                                    out.push(HyperParams {
                                        nodes,
                                        filters,
                                        pool,
                                        learning_rate,
                                        batch_size,
                                        m,
                                        p,
                                        ..base.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `hyper.nodes` and `value` is a TOML value.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut doc = toml::Value::try_from(&*self).map_err(|e| CliError::Validation(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| CliError::Validation(format!("`{key}`: `{part}` is not inside a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                slot = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("override: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        self.hyper.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.sim.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if let Some(tau) = self.tau {
            if !(tau.is_finite() && tau > 0.0) {
                return bad(format!("tau {tau} must be positive"));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)".into());
        }
        if self.replications == 0 || self.covariate_sets == 0 {
            return bad("replications and covariate_sets must be positive".into());
        }
        if self.eval.folds < 2 {
            return bad("eval.folds must be at least 2".into());
        }
        if !(self.eval.ibs_quantile > 0.0 && self.eval.ibs_quantile <= 1.0) {
            return bad("eval.ibs_quantile must lie in (0, 1]".into());
        }
        if let Some(step) = self.ingest.grid_step {
            if !(step.is_finite() && step > 0.0) {
                return bad(format!("ingest.grid_step {step} must be positive"));
            }
        }
        for path in [&self.data, &self.model].into_iter().flatten() {
            if !path.exists() {
                return bad(format!("{} does not exist", path.display()));
            }
        }
        let registry = opsurv::methods::MethodRegistry::default();
        for m in std::iter::once(&self.method).chain(&self.methods) {
            registry.get(m).map_err(|e| CliError::Validation(e.to_string()))?;
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // parse as a TOML value, falling back to a bare string
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
