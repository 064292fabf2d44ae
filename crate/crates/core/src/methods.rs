//! Survival estimators behind one interface, looked up by name at runtime.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde_json::{json, Value};

use crate::coxtv::{cox_expand, cox_predict_survival, fit_cox, read_cox, write_cox, CoxFit};
use crate::deeponet::{read_model, write_model, BranchRegistry, FittedDeepOnet, HyperParams};
use crate::error::{Result, SurvError};
use crate::seeds::SeedStreams;
use crate::survloss::{build_grid, train, StepPath, SurvivalCurve, SurvivalRecord, TimeGrid, TrainSpec, TrainTrace};

const COX_MAGIC: &str = "OPSURV-COX-MODEL 1";

/// Settings shared by every method.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub hyper: HyperParams,
    /// Grid horizon; the largest training event time when unset.
    pub tau: Option<f64>,
}

pub trait SurvivalMethod: Send + Sync {
    fn name(&self) -> &str;

    /// `valid` is used only by methods that early-stop.
    fn fit(
        &self,
        settings: &FitSettings,
        train: &[SurvivalRecord],
        valid: &[SurvivalRecord],
        seeds: &SeedStreams,
    ) -> Result<Box<dyn FittedSurvival>>;
}

pub trait FittedSurvival: Send + Sync {
    fn method(&self) -> &str;

    fn grid(&self) -> &TimeGrid;

    fn predict(&self, path: &StepPath, statics: &[f64]) -> Result<SurvivalCurve>;

    fn save(&self, out: &mut dyn Write) -> Result<()>;

    /// Fit diagnostics for reports.
    fn summary(&self) -> Value;
}

pub struct DeepOnetMethod {
    name: String,
    variant: String,
    branches: BranchRegistry,
}

impl DeepOnetMethod {
    pub fn new(variant: &str) -> Self {
        Self {
            name: format!("deeponet-{variant}"),
            variant: variant.to_string(),
            branches: BranchRegistry::default(),
        }
    }
}

impl SurvivalMethod for DeepOnetMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(
        &self,
        settings: &FitSettings,
        train_set: &[SurvivalRecord],
        valid: &[SurvivalRecord],
        seeds: &SeedStreams,
    ) -> Result<Box<dyn FittedSurvival>> {
        let spec = TrainSpec {
            variant: self.variant.clone(),
            hyper: settings.hyper.clone(),
            tau: settings.tau,
        };
        let outcome = train(&self.branches, &spec, train_set, valid, seeds)?;
        Ok(Box::new(FittedDeepOnetMethod {
            name: self.name.clone(),
            model: outcome.model,
            trace: Some(outcome.trace),
        }))
    }
}

pub struct FittedDeepOnetMethod {
    name: String,
    pub model: FittedDeepOnet,
    pub trace: Option<TrainTrace>,
}

impl FittedSurvival for FittedDeepOnetMethod {
    fn method(&self) -> &str {
        &self.name
    }

    fn grid(&self) -> &TimeGrid {
        &self.model.grid
    }

    fn predict(&self, path: &StepPath, statics: &[f64]) -> Result<SurvivalCurve> {
        self.model.predict_survival(path, statics, &self.model.grid)
    }

    fn save(&self, out: &mut dyn Write) -> Result<()> {
        write_model(&self.model, out)
    }

    fn summary(&self) -> Value {
        match &self.trace {
            Some(t) => json!({
                "method": self.name,
                "epochs": t.epochs.len(),
                "best_epoch": t.best_epoch,
                "best_valid_loss": t.best_valid_loss,
                "stopped_early": t.stopped_early,
            }),
            None => json!({ "method": self.name }),
        }
    }
}

/// Cox regression on the training set, with the time-varying covariate read
/// at the knots of the same grid the networks use.
pub struct CoxMethod;

impl SurvivalMethod for CoxMethod {
    fn name(&self) -> &str {
        "cox"
    }

    fn fit(
        &self,
        settings: &FitSettings,
        train_set: &[SurvivalRecord],
        _valid: &[SurvivalRecord],
        _seeds: &SeedStreams,
    ) -> Result<Box<dyn FittedSurvival>> {
        let grid = build_grid(train_set, settings.hyper.m, settings.tau)?;
        let fit = fit_cox(&cox_expand(train_set, &grid)?)?;
        Ok(Box::new(FittedCox { fit, grid }))
    }
}

pub struct FittedCox {
    pub fit: CoxFit,
    pub grid: TimeGrid,
}

impl FittedSurvival for FittedCox {
    fn method(&self) -> &str {
        "cox"
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn predict(&self, path: &StepPath, statics: &[f64]) -> Result<SurvivalCurve> {
        cox_predict_survival(&self.fit, path, statics, &self.grid)
    }

    fn save(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "{COX_MAGIC}")?;
        let knots: Vec<String> = self.grid.knots().iter().map(|k| format!("{k:e}")).collect();
        writeln!(out, "knots {} {}", knots.len(), knots.join(" "))?;
        write_cox(&self.fit, out)
    }

    fn summary(&self) -> Value {
        json!({
            "method": "cox",
            "beta": self.fit.beta,
            "iterations": self.fit.iterations,
            "grad_norm": self.fit.grad_norm,
        })
    }
}

/// Name-indexed collection of methods.
pub struct MethodRegistry {
    methods: BTreeMap<String, Box<dyn SurvivalMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            methods: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, method: Box<dyn SurvivalMethod>) {
        self.methods.insert(method.name().to_string(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SurvivalMethod> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            SurvError::Config(format!(
                "unknown method `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.methods.keys().map(String::as_str).collect()
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(DeepOnetMethod::new("fnn")));
        r.register(Box::new(DeepOnetMethod::new("cnn")));
        r.register(Box::new(CoxMethod));
        r
    }
}

/// Reads a file written by [`FittedSurvival::save`].
pub fn load_fitted<R: BufRead>(mut input: R) -> Result<Box<dyn FittedSurvival>> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    if first.trim() == COX_MAGIC {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let mut t = line.split_whitespace();
        if t.next() != Some("knots") {
            return Err(SurvError::Format("missing knots".into()));
        }
        let n: usize = t.next().and_then(|s| s.parse().ok()).ok_or_else(|| SurvError::Format("bad knot count".into()))?;
        let knots = t
            .map(|s| s.parse::<f64>().map_err(|_| SurvError::Format(format!("bad knot `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if knots.len() != n {
            return Err(SurvError::Format(format!("expected {n} knots, found {}", knots.len())));
        }
        let grid = TimeGrid::from_knots(knots)?;
        let fit = read_cox(input)?;
        return Ok(Box::new(FittedCox { fit, grid }));
    }
    let rest = std::io::BufReader::new(std::io::Cursor::new(first.into_bytes()).chain(input));
    let model = read_model(rest, &BranchRegistry::default())?;
    Ok(Box::new(FittedDeepOnetMethod {
        name: format!("deeponet-{}", model.net.variant()),
        model,
        trace: None,
    }))
}
