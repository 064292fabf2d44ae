use std::io::Write;
use std::process::Command;

use opsurv::coxtv::CoxFit;
use opsurv::methods::{FitSettings, FittedCox, FittedSurvival, MethodRegistry, SurvivalMethod};
use opsurv::seeds::SeedStreams;
use opsurv::simgen::{gen_dataset, observed_records, SimConfig};
use opsurv::survloss::{StepPath, SurvivalCurve, SurvivalRecord, TimeGrid};
use opsurv_cli::config::{IngestConfig, TuningGrid};
use opsurv_cli::experiments::{run_cv_with, run_replications, run_tuning, treatment_contrast, fixed_sets};
use opsurv_cli::ingest::{export_csv, ingest_csv};
use opsurv_cli::{CliError, ExperimentConfig};

fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::File::create(&path).unwrap().write_all(text.as_bytes()).unwrap();
    path
}

fn one_tv() -> IngestConfig {
    IngestConfig {
        grid_step: Some(6.0),
        tv_columns: vec!["mmse".into()],
        ti_columns: vec!["age".into()],
    }
}

#[test]
fn config_rejects_unknown_keys_and_applies_overrides() {
    assert!(ExperimentConfig::from_toml("sedd = 3").is_err());
    assert!(ExperimentConfig::from_toml("[hyper]\nnodez = 3").is_err());
    let mut cfg = ExperimentConfig::from_toml("seed = 4\n[hyper]\nnodes = 64").unwrap();
    assert_eq!(cfg.hyper.nodes, 64);
    assert_eq!(cfg.hyper.filters, 16);
    cfg.apply_overrides(&["hyper.nodes=32".into(), "tau=90".into(), "method=\"cox\"".into()]).unwrap();
    assert_eq!((cfg.seed, cfg.hyper.nodes, cfg.tau), (4, 32, Some(90.0)));
    assert_eq!(cfg.method, "cox");
    assert!(cfg.apply_overrides(&["hyper.bogus=1".into()]).is_err());
    cfg.validate().unwrap();
    cfg.method = "deeponet-rnn".into();
    assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
}

#[test]
fn forward_fill_and_snapping() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "id,visit_time,event_time,event_indicator,mmse,age\n\
               a,0,30,1,28,70\n\
               a,6.2,30,1,,\n\
               a,18,30,1,25,\n\
               a,5.9,30,1,27,\n\
               b,0,12,0,29,64\n";
    let path = write_file(&dir, "d.csv", csv);
    let (records, report) = ingest_csv(&path, &one_tv()).unwrap();
    assert_eq!(report.kept, 2);
    let a = &records[0];
    // 5.9 and 6.2 both snap to 6; the later one carries 27 forward
    assert_eq!(a.path.times(), &[0.0, 6.0, 18.0]);
    assert_eq!(a.path.values(), &[28.0, 27.0, 25.0]);
    assert_eq!(a.path.eval(12.0), Some(&[27.0][..]));
    assert_eq!(a.statics, vec![70.0]);
    let b = &records[1];
    assert_eq!(b.path.eval(11.0), Some(&[29.0][..]));
    assert!(!b.event);
}

#[test]
fn exclusions_and_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "id,visit_time,event_time,event_indicator,mmse,age\n\
               a,6,30,1,28,70\n\
               b,0,12,0,,64\n\
               b,6,12,0,22,64\n\
               c,0,5,1,20,80\n";
    let (records, report) = ingest_csv(&write_file(&dir, "d.csv", csv), &one_tv()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!((report.missing_baseline_visit, report.missing_baseline_value), (1, 1));

    let bad = "id,visit_time,event_time,event_indicator,mmse,age\na,0,30,1,28,70\na,x,30,1,28,70\n";
    match ingest_csv(&write_file(&dir, "bad.csv", bad), &one_tv()).unwrap_err() {
        CliError::Csv { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let missing = "id,visit_time,event_time,mmse,age\na,0,30,28,70\n";
    assert!(ingest_csv(&write_file(&dir, "m.csv", missing), &one_tv()).is_err());
}

#[test]
fn export_then_ingest_round_trips() {
    let data = observed_records(&gen_dataset(&SimConfig { n: 40, seed: 2, ..SimConfig::default() }).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.csv");
    let cfg = IngestConfig::default();
    export_csv(&data, &cfg, std::fs::File::create(&path).unwrap()).unwrap();
    let (back, _) = ingest_csv(&path, &cfg).unwrap();
    assert_eq!(back, data);
}

fn cox_ignoring_treatment(grid: &TimeGrid) -> FittedCox {
    FittedCox {
        fit: CoxFit {
            beta: vec![0.02, 0.0, 0.5],
            baseline: vec![(10.0, 0.1), (40.0, 0.5), (80.0, 0.9)],
            iterations: 0,
            grad_norm: 0.0,
        },
        grid: grid.clone(),
    }
}

#[test]
fn contrast_pairs() {
    let cfg = ExperimentConfig::default();
    let sets = fixed_sets(&cfg);
    let grid = TimeGrid::even(100.0, 50).unwrap();
    let model = cox_ignoring_treatment(&grid);
    let pairs = treatment_contrast(&model, &sets, 0).unwrap();
    assert_eq!(pairs.len(), 2 * sets.len());
    for pair in pairs.chunks(2) {
        assert_eq!((pair[0].1, pair[1].1), (0.0, 1.0));
        assert_eq!(pair[0].2, pair[1].2);
    }
    // the x^2 z cumulative term is positive, so treatment lowers the true curve
    for s in &sets {
        let mut on = s.clone();
        on.covariates.z = 1.0;
        let mut off = s.clone();
        off.covariates.z = 0.0;
        let a = on.truth(&cfg.sim, &grid).unwrap();
        let b = off.truth(&cfg.sim, &grid).unwrap();
        assert!(a.values().iter().zip(b.values()).skip(1).all(|(x, y)| x < y));
    }
}

/// Methods that read each subject's observed time from its single static.
struct Stub {
    name: &'static str,
}

struct StubFit {
    name: &'static str,
    grid: TimeGrid,
}

impl SurvivalMethod for Stub {
    fn name(&self) -> &str {
        self.name
    }

    fn fit(&self, _: &FitSettings, _: &[SurvivalRecord], _: &[SurvivalRecord], _: &SeedStreams) -> opsurv::Result<Box<dyn FittedSurvival>> {
        Ok(Box::new(StubFit { name: self.name, grid: TimeGrid::even(100.0, 100).unwrap() }))
    }
}

impl FittedSurvival for StubFit {
    fn method(&self) -> &str {
        self.name
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn predict(&self, _: &StepPath, statics: &[f64]) -> opsurv::Result<SurvivalCurve> {
        let y = statics[0];
        let values = self
            .grid
            .knots()
            .iter()
            .enumerate()
            .map(|(k, &t)| match self.name {
                "oracle" => f64::from(u8::from(y > t)),
                _ => if k == 0 { 1.0 } else { 0.5 },
            })
            .collect();
        SurvivalCurve::new(self.grid.knots().to_vec(), values)
    }

    fn save(&self, _: &mut dyn Write) -> opsurv::Result<()> {
        Ok(())
    }

    fn summary(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

#[test]
fn cross_validation_with_stub_predictors() {
    let mut registry = MethodRegistry::empty();
    registry.register(Box::new(Stub { name: "oracle" }));
    registry.register(Box::new(Stub { name: "half" }));
    let records: Vec<SurvivalRecord> = (0..60)
        .map(|i| {
            let y = 0.5 + i as f64 * 1.5;
            SurvivalRecord::new(i.to_string(), y, true, StepPath::empty(), vec![y]).unwrap()
        })
        .collect();
    let cfg = ExperimentConfig {
        methods: vec!["oracle".into(), "half".into()],
        ..ExperimentConfig::default()
    };
    let report = run_cv_with(&registry, &cfg, &records).unwrap();
    assert_eq!(report.folds.len(), 5);
    assert_eq!(report.mean("oracle"), Some(0.0));
    // the half stub keeps S(0) = 1, which the trapezoid sees on its first panel
    for fold in &report.folds {
        let r = &fold.ibs[1].1;
        let first_panel = 0.5 * (0.0 + 0.25) * 1.0;
        let want = (0.25 * (r.upper - 1.0) + first_panel) / r.upper;
        assert!((r.ibs - want).abs() < 1e-12);
    }
}

#[test]
fn tuning_grid_enumeration_and_selection() {
    let grid = TuningGrid::default();
    let base = ExperimentConfig::default().hyper;
    let all = grid.combinations(&base);
    assert_eq!(all.len(), 4 * 3 * 2 * 3 * 3 * 5);
    assert!(all.iter().any(|h| h.nodes == 128
        && h.filters == 16
        && h.pool == 8
        && h.learning_rate == 0.001
        && h.batch_size == 1000
        && h.p == 10));
    // the chosen m is a median of per-dataset optima, so it sits between grid values
    assert!(grid.m.iter().any(|&m| m < 250) && grid.m.iter().any(|&m| m > 250));

    let mut cfg = ExperimentConfig::default();
    cfg.method = "deeponet-fnn".into();
    cfg.hyper.max_epochs = 3;
    cfg.tuning = TuningGrid {
        nodes: vec![8, 16],
        filters: vec![4],
        pool: vec![4],
        learning_rate: vec![0.001],
        batch_size: vec![200],
        m: vec![10],
        p: vec![4],
    };
    let sim = |seed| observed_records(&gen_dataset(&SimConfig { n: 120, seed, ..SimConfig::default() }).unwrap());
    let (best, rows) = run_tuning(&cfg, &sim(1), &sim(2), &sim(3)).unwrap();
    assert_eq!(rows.len(), 2);
    let winner = rows.iter().min_by(|a, b| a.test_loss.total_cmp(&b.test_loss)).unwrap();
    assert_eq!(best.nodes, winner.nodes);

    cfg.tuning.nodes = vec![8];
    let (single, rows) = run_tuning(&cfg, &sim(1), &sim(2), &sim(3)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(single.nodes, 8);
}

#[test]
fn single_replication_band_is_the_curve() {
    let mut cfg = ExperimentConfig::default();
    cfg.replications = 1;
    cfg.methods = vec!["cox".into()];
    cfg.sim.n = 300;
    cfg.hyper.m = 25;
    cfg.covariate_sets = 3;
    let (table, report) = run_replications(&cfg).unwrap();
    assert!(report.failures.is_empty());
    for set in 0..3 {
        let band = table.band("cox", set).unwrap();
        let curve = &table.curves[&("cox".to_string(), set)][0].1;
        assert_eq!(&band.mean, curve);
        assert_eq!(&band.lower, curve);
        assert_eq!(&band.upper, curve);
    }
    let mut bytes = Vec::new();
    table.write_curves(&mut bytes).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 26);
    assert!(text.starts_with("method,covariate_set,replication,t,S\n"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_opsurv");
    let dir = tempfile::tempdir().unwrap();
    let bad = write_file(&dir, "bad.toml", "[hyper]\nnodez = 1\n");
    let status = Command::new(bin).args(["train", "-c"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let missing = Command::new(bin).args(["predict", "--model", "/nonexistent/model.txt"]).status().unwrap();
    assert_eq!(missing.code(), Some(1));
    let ok = Command::new(bin)
        .args(["simulate", "--set", "sim.n=20", "-o"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(ok.code(), Some(0));
    assert!(dir.path().join("data.csv").exists() && dir.path().join("truth.csv").exists());
}

#[test]
fn documented_example_config_parses() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/example.toml");
    let cfg = ExperimentConfig::load(std::path::Path::new(path)).unwrap();
    assert_eq!(cfg.ingest.tv_columns, ["mmse", "adas13"]);
    assert_eq!(cfg.hyper, ExperimentConfig::default().hyper);
}
