//! The experiment protocols behind each subcommand.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;

use log::{error, info};
use opsurv::deeponet::BranchRegistry;
use opsurv::evalmetrics::{integrated_brier, kfold_split, quantile, IbsResult};
use opsurv::methods::{load_fitted, FitSettings, FittedSurvival, MethodRegistry};
use opsurv::seeds::{SeedStreams, FOLDS, SIMDATA};
use opsurv::simgen::{covariate_sets, gen_dataset, observed_records, CovariateSet, SimConfig, SimRecord};
use opsurv::survloss::{train, SurvivalCurve, SurvivalRecord, TrainSpec};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::ingest::{export_csv, export_truth, ingest_csv};
use crate::output::{create, write_json, write_named_curves, CurveTable, MethodSummary};

/// Named child stream for replication `r`.
const REPLICATION: &str = "replication";

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn settings(cfg: &ExperimentConfig) -> FitSettings {
    FitSettings {
        hyper: cfg.hyper.clone(),
        tau: cfg.tau,
    }
}

/// Simulated sample `part` of job `job`, each from its own stream.
pub fn simulated(cfg: &ExperimentConfig, job: u64, part: u64) -> Result<Vec<SimRecord>> {
    let seeds = SeedStreams::new(cfg.seed);
    let sim = SimConfig {
        seed: seeds.derive_seed(SIMDATA, &[job, part]),
        ..cfg.sim.clone()
    };
    Ok(gen_dataset(&sim)?)
}

fn simulated_records(cfg: &ExperimentConfig, job: u64, part: u64) -> Result<Vec<SurvivalRecord>> {
    Ok(observed_records(&simulated(cfg, job, part)?))
}

fn ingested(cfg: &ExperimentConfig) -> Result<Option<Vec<SurvivalRecord>>> {
    match &cfg.data {
        Some(path) => Ok(Some(ingest_csv(path, &cfg.ingest)?.0)),
        None => Ok(None),
    }
}

/// Randomly holds out `fraction` of `records`.
pub fn holdout(records: &[SurvivalRecord], fraction: f64, seeds: &SeedStreams, key: &[u64]) -> (Vec<SurvivalRecord>, Vec<SurvivalRecord>) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut seeds.rng(FOLDS, key));
    let cut = ((records.len() as f64) * fraction).round().max(1.0) as usize;
    let (held, kept) = order.split_at(cut.min(records.len().saturating_sub(1)));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    (pick(kept), pick(held))
}

/// Training and validation samples: a split of the CSV input, or two
/// independent simulated samples.
fn train_valid(cfg: &ExperimentConfig) -> Result<(Vec<SurvivalRecord>, Vec<SurvivalRecord>)> {
    let seeds = SeedStreams::new(cfg.seed);
    match ingested(cfg)? {
        Some(records) => Ok(holdout(&records, cfg.validation_fraction, &seeds, &[0])),
        None => Ok((simulated_records(cfg, 0, 0)?, simulated_records(cfg, 0, 1)?)),
    }
}

fn fit(cfg: &ExperimentConfig, method: &str, train_set: &[SurvivalRecord], valid: &[SurvivalRecord], seeds: &SeedStreams) -> Result<Box<dyn FittedSurvival>> {
    fit_with(&MethodRegistry::default(), cfg, method, train_set, valid, seeds)
}

fn fit_with(
    registry: &MethodRegistry,
    cfg: &ExperimentConfig,
    method: &str,
    train_set: &[SurvivalRecord],
    valid: &[SurvivalRecord],
    seeds: &SeedStreams,
) -> Result<Box<dyn FittedSurvival>> {
    Ok(registry.get(method)?.fit(&settings(cfg), train_set, valid, seeds)?)
}

fn load_model(cfg: &ExperimentConfig) -> Result<Box<dyn FittedSurvival>> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| CliError::Validation("a model file is required (--model)".into()))?;
    Ok(load_fitted(BufReader::new(File::open(path)?))?)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let data = simulated(cfg, 0, 0)?;
    export_csv(&observed_records(&data), &cfg.ingest, create(&out_path(cfg, "data.csv")?)?)?;
    export_truth(&data, create(&out_path(cfg, "truth.csv")?)?)?;
    let events = data.iter().filter(|s| s.record.event).count();
    write_json(
        &out_path(cfg, "simulate.json")?,
        &json!({
            "n": data.len(),
            "events": events,
            "censoring_rate": 1.0 - events as f64 / data.len() as f64,
        }),
    )
}

pub fn train_model(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, valid) = train_valid(cfg)?;
    let model = fit(cfg, &cfg.method, &train_set, &valid, &SeedStreams::new(cfg.seed))?;
    model.save(&mut create(&out_path(cfg, "model.txt")?)?)?;
    write_json(&out_path(cfg, "train.json")?, &model.summary())
}

/// Curves for the CSV subjects, or for the simulated covariate sets.
pub fn predict(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let curves: Vec<(String, SurvivalCurve)> = match ingested(cfg)? {
        Some(records) => records
            .iter()
            .map(|r| Ok((r.id.clone(), model.predict(&r.path, &r.statics)?)))
            .collect::<Result<_>>()?,
        None => fixed_sets(cfg)
            .iter()
            .map(|s| Ok((format!("set{}", s.index), model.predict(&s.path, &s.covariates.statics())?)))
            .collect::<Result<_>>()?,
    };
    write_named_curves(&curves, create(&out_path(cfg, "predictions.csv")?)?)
}

/// Integrated Brier score of one fitted model on `records`.
pub fn ibs_of(model: &dyn FittedSurvival, records: &[SurvivalRecord], q: f64) -> Result<IbsResult> {
    let curves: Vec<SurvivalCurve> = records
        .iter()
        .map(|r| model.predict(&r.path, &r.statics))
        .collect::<opsurv::Result<_>>()?;
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let grid = model.grid();
    let upper = quantile(&times, q)?.min(grid.tau());
    Ok(integrated_brier(&curves, records, grid, upper)?)
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let records = match ingested(cfg)? {
        Some(r) => r,
        None => simulated_records(cfg, 0, 2)?,
    };
    let ibs = ibs_of(model.as_ref(), &records, cfg.eval.ibs_quantile)?;
    write_json(
        &out_path(cfg, "evaluation.json")?,
        &json!({ "method": model.method(), "n": records.len(), "ibs": ibs }),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_size: usize,
    pub ibs: Vec<(String, IbsResult)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Per method: mean and standard deviation of the fold scores.
    pub summary: Vec<(String, f64, f64)>,
    pub ibs_quantile: f64,
}

impl CvReport {
    pub fn mean(&self, method: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.0 == method).map(|s| s.1)
    }
}

/// k-fold cross-validated integrated Brier scores. Within each fold the
/// training part loses `validation_fraction` of its subjects to early
/// stopping, and every method fits on the remainder.
pub fn run_cv(cfg: &ExperimentConfig, records: &[SurvivalRecord]) -> Result<CvReport> {
    run_cv_with(&MethodRegistry::default(), cfg, records)
}

pub fn run_cv_with(registry: &MethodRegistry, cfg: &ExperimentConfig, records: &[SurvivalRecord]) -> Result<CvReport> {
    let seeds = SeedStreams::new(cfg.seed);
    let k = cfg.eval.folds;
    let folds = kfold_split(records.len(), k, &mut seeds.rng(FOLDS, &[]))?;
    let mut results = Vec::with_capacity(k);
    for f in 0..k {
        let (train_idx, test_idx) = folds.split(f);
        let test: Vec<SurvivalRecord> = test_idx.iter().map(|&i| records[i].clone()).collect();
        let rest: Vec<SurvivalRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
        if !test.iter().any(|r| r.event) || !rest.iter().any(|r| r.event) {
            return Err(CliError::Surv(opsurv::SurvError::Data(format!("fold {f} has no events"))));
        }
        let (train_set, valid) = holdout(&rest, cfg.validation_fraction, &seeds, &[1, f as u64]);
        let fold_seeds = seeds.child(FOLDS, &[f as u64]);
        let mut ibs = Vec::new();
        for method in &cfg.methods {
            let model = fit_with(registry, cfg, method, &train_set, &valid, &fold_seeds)?;
            let r = ibs_of(model.as_ref(), &test, cfg.eval.ibs_quantile)?;
            info!("fold {f} {method}: IBS {:.4}", r.ibs);
            ibs.push((method.clone(), r));
        }
        results.push(FoldResult {
            fold: f,
            test_size: test.len(),
            ibs,
        });
    }
    let summary = cfg
        .methods
        .iter()
        .map(|m| {
            let v: Vec<f64> = results
                .iter()
                .map(|r| r.ibs.iter().find(|x| &x.0 == m).expect("every method").1.ibs)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
            (m.clone(), mean, var.sqrt())
        })
        .collect();
    Ok(CvReport {
        folds: results,
        summary,
        ibs_quantile: cfg.eval.ibs_quantile,
    })
}

pub fn cv(cfg: &ExperimentConfig) -> Result<CvReport> {
    let records = match ingested(cfg)? {
        Some(r) => r,
        None => simulated_records(cfg, 0, 0)?,
    };
    let report = run_cv(cfg, &records)?;
    write_json(&out_path(cfg, "cv.json")?, &report)?;
    Ok(report)
}

pub fn fixed_sets(cfg: &ExperimentConfig) -> Vec<CovariateSet> {
    covariate_sets(&cfg.sim, &SeedStreams::new(cfg.seed), cfg.covariate_sets)
}

#[derive(Debug, Clone, Serialize)]
pub struct JobFailure {
    pub replication: usize,
    pub method: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationReport {
    pub replications: usize,
    pub n: usize,
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<JobFailure>,
}

/// Repeated simulate-train-predict over fresh samples, with every method
/// predicting the same fixed covariate sets. The grid horizon defaults to the
/// simulation horizon so all replications share one grid.
pub fn run_replications(cfg: &ExperimentConfig) -> Result<(CurveTable, ReplicationReport)> {
    let mut cfg = cfg.clone();
    cfg.tau = cfg.tau.or(Some(cfg.sim.tau));
    let root = SeedStreams::new(cfg.seed);
    let sets = fixed_sets(&cfg);
    let mut table = CurveTable::default();
    let mut failures = Vec::new();
    for r in 0..cfg.replications {
        let train_set = simulated_records(&cfg, r as u64, 0)?;
        let valid = simulated_records(&cfg, r as u64, 1)?;
        let seeds = root.child(REPLICATION, &[r as u64]);
        for method in &cfg.methods {
            let outcome = fit(&cfg, method, &train_set, &valid, &seeds).and_then(|model| {
                let curves = sets
                    .iter()
                    .map(|s| model.predict(&s.path, &s.covariates.statics()))
                    .collect::<opsurv::Result<Vec<_>>>()?;
                if table.truth.is_empty() {
                    for s in &sets {
                        table.truth.insert(s.index, s.truth(&cfg.sim, model.grid())?.values().to_vec());
                    }
                }
                Ok(curves)
            });
            match outcome {
                Ok(curves) => {
                    for (s, c) in sets.iter().zip(&curves) {
                        table.insert(method, s.index, r, c);
                    }
                    info!("replication {r} {method}: done");
                }
                Err(e) => {
                    error!("replication {r} {method}: {e}");
                    failures.push(JobFailure {
                        replication: r,
                        method: method.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let report = ReplicationReport {
        replications: cfg.replications,
        n: cfg.sim.n,
        methods: table.summarize(),
        failures,
    };
    Ok((table, report))
}

pub fn replicate(cfg: &ExperimentConfig) -> Result<ReplicationReport> {
    let (table, report) = run_replications(cfg)?;
    table.write_curves(create(&out_path(cfg, "curves.csv")?)?)?;
    table.write_bands(create(&out_path(cfg, "bands.csv")?)?)?;
    write_json(&out_path(cfg, "replicate.json")?, &report)?;
    if !report.failures.is_empty() {
        return Err(CliError::Jobs {
            failed: report.failures.len(),
            total: cfg.replications * cfg.methods.len(),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningRow {
    pub index: usize,
    pub nodes: usize,
    pub filters: usize,
    pub pool: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub m: usize,
    pub p: usize,
    pub parameters: usize,
    pub best_epoch: usize,
    pub valid_loss: f64,
    pub test_loss: f64,
}

/// Grid search over the tuning lists: each combination trains with early
/// stopping on `valid` and is scored by its loss on `test`. Ties go to the
/// combination with fewer parameters.
pub fn run_tuning(
    cfg: &ExperimentConfig,
    train_set: &[SurvivalRecord],
    valid: &[SurvivalRecord],
    test: &[SurvivalRecord],
) -> Result<(opsurv::deeponet::HyperParams, Vec<TuningRow>)> {
    let variant = cfg
        .method
        .strip_prefix("deeponet-")
        .ok_or_else(|| CliError::Validation(format!("tuning needs a deeponet method, not `{}`", cfg.method)))?;
    let branches = BranchRegistry::default();
    let seeds = SeedStreams::new(cfg.seed);
    let candidates = cfg.tuning.combinations(&cfg.hyper);
    if candidates.is_empty() {
        return Err(CliError::Validation("the tuning grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for (index, hyper) in candidates.iter().enumerate() {
        let spec = TrainSpec {
            variant: variant.to_string(),
            hyper: hyper.clone(),
            tau: cfg.tau,
        };
        let outcome = train(&branches, &spec, train_set, valid, &seeds)?;
        let test_loss = outcome.model.loss_on(test)?;
        info!("tuning {index}: test loss {test_loss:.6}");
        rows.push(TuningRow {
            index,
            nodes: hyper.nodes,
            filters: hyper.filters,
            pool: hyper.pool,
            learning_rate: hyper.learning_rate,
            batch_size: hyper.batch_size,
            m: hyper.m,
            p: hyper.p,
            parameters: outcome.model.net.params.num_scalars(),
            best_epoch: outcome.trace.best_epoch,
            valid_loss: outcome.trace.best_valid_loss,
            test_loss,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.test_loss.total_cmp(&b.test_loss).then(a.parameters.cmp(&b.parameters)))
        .expect("nonempty");
    Ok((candidates[best.index].clone(), rows))
}

pub fn tune(cfg: &ExperimentConfig) -> Result<()> {
    let seeds = SeedStreams::new(cfg.seed);
    let (train_set, valid, test) = match ingested(cfg)? {
        Some(records) => {
            let (rest, test) = holdout(&records, 0.2, &seeds, &[2]);
            let (train_set, valid) = holdout(&rest, 0.25, &seeds, &[3]);
            (train_set, valid, test)
        }
        None => (
            simulated_records(cfg, 0, 0)?,
            simulated_records(cfg, 0, 1)?,
            simulated_records(cfg, 0, 2)?,
        ),
    };
    let (best, rows) = run_tuning(cfg, &train_set, &valid, &test)?;
    let mut w = csv::Writer::from_writer(create(&out_path(cfg, "tuning.csv")?)?);
    for row in &rows {
        w.serialize(row).map_err(crate::ingest::csv_io)?;
    }
    w.flush()?;
    write_json(&out_path(cfg, "tuning.json")?, &json!({ "best": best, "candidates": rows.len() }))
}

/// Paired curves with the treatment switched off and on for every covariate set.
pub fn treatment_contrast(
    model: &dyn FittedSurvival,
    sets: &[CovariateSet],
    treatment_index: usize,
) -> Result<Vec<(usize, f64, SurvivalCurve)>> {
    let mut out = Vec::with_capacity(2 * sets.len());
    for s in sets {
        for z in [0.0, 1.0] {
            let mut statics = s.covariates.statics();
            let slot = statics
                .get_mut(treatment_index)
                .ok_or_else(|| CliError::Validation(format!("no static covariate at index {treatment_index}")))?;
            *slot = z;
            out.push((s.index, z, model.predict(&s.path, &statics)?));
        }
    }
    Ok(out)
}

pub fn contrast(cfg: &ExperimentConfig) -> Result<()> {
    let model = match &cfg.model {
        Some(_) => load_model(cfg)?,
        None => {
            let (train_set, valid) = train_valid(cfg)?;
            fit(cfg, &cfg.method, &train_set, &valid, &SeedStreams::new(cfg.seed))?
        }
    };
    let sets = fixed_sets(cfg);
    let pairs = treatment_contrast(model.as_ref(), &sets, cfg.treatment_index)?;
    let mut w = csv::Writer::from_writer(create(&out_path(cfg, "contrast.csv")?)?);
    w.write_record(["covariate_set", "z", "t", "S", "truth"]).map_err(crate::ingest::csv_io)?;
    for (set, z, curve) in &pairs {
        let cov = sets[*set].covariates.with_z(*z);
        let truth = CovariateSet {
            covariates: cov,
            ..sets[*set].clone()
        }
        .truth(&cfg.sim, model.grid())?;
        for (j, t) in curve.knots().iter().enumerate() {
            w.write_record([
                set.to_string(),
                z.to_string(),
                t.to_string(),
                curve.values()[j].to_string(),
                truth.values()[j].to_string(),
            ])
            .map_err(crate::ingest::csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}
