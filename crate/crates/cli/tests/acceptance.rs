use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use mimalloc::MiMalloc;
use ndarray::Array2;
use numcore::{grad_check, ParamStore, Tape};
use opsurv::coxtv::{cox_expand, fit_cox, partial_loglik};
use opsurv::deeponet::{Batch, BranchRegistry, DeepOnet, HyperParams, InputDims, Standardizer};
use opsurv::evalmetrics::{default_upper, integrated_brier};
use opsurv::methods::{FitSettings, MethodRegistry};
use opsurv::seeds::SeedStreams;
use opsurv::simgen::{gen_dataset, observed_records, SimConfig};
use opsurv::survloss::{
    batch_loss_grad, expand_dataset, likelihood_loss, ExpandedDataset, ExpandedRow, StepPath, SurvivalCurve,
    SurvivalRecord, TimeGrid,
};
use opsurv_cli::experiments::{run_cv, run_replications, simulated, replicate};
use opsurv_cli::output::MethodSummary;
use opsurv_cli::ExperimentConfig;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(name: &str, i: u64) -> impl Rng {
    SeedStreams::new(20_240_917).rng(name, &[i])
}

fn toy_records(seed: u64, n: usize, tau: f64) -> Vec<SurvivalRecord> {
    let mut rng = rng("toy", seed);
    (0..n)
        .map(|i| {
            let visits = rng.random_range(1..6);
            let mut times: Vec<f64> = (1..visits).map(|_| rng.random_range(0.0..tau)).collect();
            times.push(0.0);
            times.sort_by(f64::total_cmp);
            times.dedup();
            let values = times.iter().map(|_| rng.random_range(-1.5..1.5)).collect();
            let path = StepPath::new(times, values, 1).unwrap();
            let statics = vec![f64::from(u8::from(rng.random_bool(0.5))), rng.random_range(-1.0..1.0)];
            SurvivalRecord::new(i.to_string(), rng.random_range(0.05..tau), rng.random_bool(0.7), path, statics).unwrap()
        })
        .collect()
}

fn full_loss(net: &DeepOnet, data: &ExpandedDataset, params: &mut ParamStore, grad: bool) -> f64 {
    let rows: Vec<&ExpandedRow> = data.rows.iter().collect();
    let batch = Batch::gather(data, &rows);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, params, &batch).unwrap();
    let h: Vec<f64> = tape.value(out).iter().copied().collect();
    let (loss, dh) = batch_loss_grad(&h, &rows, 1.0 / data.n_subjects() as f64).unwrap();
    if grad {
        let seed = Array2::from_shape_vec((rows.len(), 1), dh).unwrap();
        tape.backward_with(params, out, seed).unwrap();
    }
    loss
}

fn gradient_fidelity() -> Outcome {
    let grid = TimeGrid::even(10.0, 10).unwrap();
    let hyper = HyperParams {
        nodes: 6,
        filters: 3,
        kernel_width: 3,
        pool: 2,
        m: 10,
        p: 4,
        ..HyperParams::default()
    };
    let mut worst = Vec::new();
    for variant in ["fnn", "cnn"] {
        let mut max = 0.0f64;
        for seed in 0..3 {
            let raw = expand_dataset(&toy_records(seed, 8, 10.0), &grid).unwrap();
            let data = Standardizer::fit(&raw).apply(&raw);
            let dims = InputDims {
                m: data.m(),
                tv_dim: data.tv_dim,
                ti_dim: data.ti_dim,
            };
            let net = DeepOnet::build(&BranchRegistry::default(), variant, dims, &hyper, &mut rng("init", seed)).unwrap();
            let mut store = net.params.clone();
            let report = grad_check(&mut store, 1e-6, |p, g| full_loss(&net, &data, p, g));
            max = max.max(report.max_rel_error);
        }
        worst.push((variant, max));
    }
    check(
        worst.iter().all(|w| w.1 < 1e-5),
        format!("max relative error fnn {:.2e}, cnn {:.2e}", worst[0].1, worst[1].1),
    )
}

fn loss_oracle(grid: &TimeGrid, ys: &[(f64, bool)], h: &[Vec<f64>]) -> f64 {
    let k = grid.knots();
    let m = grid.m();
    let mut total = 0.0;
    for (i, &(y, d)) in ys.iter().enumerate() {
        for j in 1..=m {
            if k[j - 1] > y {
                break;
            }
            total += h[i][j - 1].exp() * (k[j] - k[j - 1]);
            if d && (y < k[j] || (j == m && y <= k[m])) {
                total -= h[i][j - 1];
            }
        }
    }
    total / ys.len() as f64
}

fn loss_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = rng("loss", seed);
        let m = rng.random_range(1..=12);
        let n = rng.random_range(1..=20);
        let grid = TimeGrid::even(rng.random_range(0.5..50.0), m).unwrap();
        let ys: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let y = match rng.random_range(0..3) {
                    0 => grid.knot(rng.random_range(0..=m)),
                    _ => grid.tau() * rng.random_range(0.0..1.3),
                };
                (y, rng.random_bool(0.6))
            })
            .collect();
        let h: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-3.0..2.0)).collect()).collect();
        let records: Vec<_> = ys
            .iter()
            .map(|&(y, d)| SurvivalRecord::new("s", y, d, StepPath::empty(), vec![]).unwrap())
            .collect();
        let data = expand_dataset(&records, &grid).unwrap();
        let hv: Vec<f64> = data.rows.iter().map(|r| h[r.subject][r.interval - 1]).collect();
        let got = likelihood_loss(&hv, &data).unwrap();
        let want = loss_oracle(&grid, &ys, &h);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let grid = TimeGrid::even(1.0, 2).unwrap();
    let one = [SurvivalRecord::new("a", 0.7, true, StepPath::empty(), vec![]).unwrap()];
    let data = expand_dataset(&one, &grid).unwrap();
    let hand = likelihood_loss(&vec![0.0; data.rows.len()], &data).unwrap();
    check(
        worst <= 1e-12 && (hand - 1.0).abs() <= 1e-15,
        format!("max deviation {worst:.1e} over 100 instances; hand case {hand}"),
    )
}

/// Constant-rate failures with covariates that carry no effect.
fn exponential_records(seed: u64, n: usize, rate: f64) -> Vec<SurvivalRecord> {
    let mut rng = rng("exponential", seed);
    let failure = Exp::new(rate).unwrap();
    (0..n)
        .map(|i| {
            let t = failure.sample(&mut rng);
            let c = rng.random_range(0.0..80.0);
            let y: f64 = t.min(c);
            let mut times = vec![0.0];
            times.extend((1..4).map(|_| rng.random_range(0.0..80.0)));
            times.sort_by(f64::total_cmp);
            let values = times.iter().map(|_| rng.sample(StandardNormal)).collect();
            let path = StepPath::new(times, values, 1).unwrap().truncated(y);
            let statics = vec![f64::from(u8::from(rng.random_bool(0.5))), rng.sample(StandardNormal)];
            SurvivalRecord::new(i.to_string(), y, t <= c, path, statics).unwrap()
        })
        .collect()
}

fn constant_hazard_recovery() -> Outcome {
    let tau = 20.0;
    let train_set = exponential_records(0, 2000, 0.05);
    let valid = exponential_records(1, 2000, 0.05);
    let events = train_set.iter().filter(|r| r.event && r.time <= tau).count();
    let exposure: f64 = train_set.iter().map(|r| r.time.min(tau)).sum();
    let oracle = events as f64 / exposure;
    let settings = FitSettings {
        hyper: HyperParams {
            m: 50,
            ..HyperParams::default()
        },
        tau: Some(tau),
    };
    let registry = MethodRegistry::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for method in ["deeponet-fnn", "deeponet-cnn"] {
        let model = registry
            .get(method)
            .and_then(|m| m.fit(&settings, &train_set, &valid, &SeedStreams::new(3)))
            .map_err(|e| format!("{method}: {e}"))?;
        let grid = model.grid().clone();
        let mut mean = vec![0.0; grid.m()];
        let sample = &train_set[..];
        for r in sample {
            let s = model.predict(&r.path, &r.statics).map_err(|e| e.to_string())?;
            for j in 1..=grid.m() {
                mean[j - 1] += (s.values()[j - 1] / s.values()[j]).ln() / grid.width(j) / sample.len() as f64;
            }
        }
        let (worst, dev) = mean
            .iter()
            .map(|h| (h / oracle - 1.0).abs())
            .enumerate()
            .fold((0, 0.0), |acc, (j, d)| if d > acc.1 { (j, d) } else { acc });
        ok &= dev < 0.1;
        let mid = 0.5 * (grid.knot(worst) + grid.knot(worst + 1));
        lines.push(format!("{method} max relative deviation {dev:.3} at t = {mid:.1}"));
    }
    check(ok, format!("occurrence/exposure {oracle:.5}; {}", lines.join(", ")))
}

struct Runs {
    methods: Vec<MethodSummary>,
    failures: usize,
}

fn simulation_runs() -> &'static Result<Runs, String> {
    static RUNS: OnceLock<Result<Runs, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = ExperimentConfig {
            replications: 10,
            methods: vec!["deeponet-fnn".into(), "deeponet-cnn".into(), "cox".into()],
            ..ExperimentConfig::default()
        };
        let (_, report) = run_replications(&cfg).map_err(|e| e.to_string())?;
        Ok(Runs {
            methods: report.methods,
            failures: report.failures.len(),
        })
    })
}

fn summary<'a>(runs: &'a Runs, method: &str) -> Result<&'a MethodSummary, String> {
    runs.methods
        .iter()
        .find(|m| m.method == method)
        .ok_or_else(|| format!("no results for {method}"))
}

fn curve_recovery() -> Outcome {
    let runs = simulation_runs().as_ref()?;
    let cnn = summary(runs, "deeponet-cnn")?;
    let fnn = summary(runs, "deeponet-fnn")?;
    let worst = cnn.sets.iter().map(|s| s.mean_curve_error).fold(0.0, f64::max);
    let fnn_worst = fnn.sets.iter().map(|s| s.mean_curve_error).fold(0.0, f64::max);
    check(
        runs.failures == 0 && cnn.sets.len() == 9 && worst < 0.05 && cnn.mean_band_width <= fnn.mean_band_width,
        format!(
            "cnn worst set error {worst:.4} (fnn {fnn_worst:.4}); band width cnn {:.4} vs fnn {:.4}; {} failed jobs",
            cnn.mean_band_width, fnn.mean_band_width, runs.failures
        ),
    )
}

fn cox_bias() -> Outcome {
    let runs = simulation_runs().as_ref()?;
    let cnn = summary(runs, "deeponet-cnn")?;
    let cox = summary(runs, "cox")?;
    let worse = cox
        .sets
        .iter()
        .zip(&cnn.sets)
        .filter(|(c, d)| c.mean_curve_error > d.mean_curve_error)
        .count();
    let largest = cox.sets.iter().map(|s| s.mean_curve_error).fold(0.0, f64::max);
    check(
        worse >= 7 && largest > 0.05,
        format!(
            "cox worse on {worse} of {} sets; largest cox error {largest:.4}; per set cox/cnn {}",
            cox.sets.len(),
            cox.sets
                .iter()
                .zip(&cnn.sets)
                .map(|(c, d)| format!("{:.4}/{:.4}", c.mean_curve_error, d.mean_curve_error))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn cox_correctness() -> Outcome {
    let grid = TimeGrid::even(60.0, 20).unwrap();
    let mut rng = rng("cox", 0);
    let records: Vec<_> = (0..5000)
        .map(|i| {
            // x changes at grid knots, so the grid-start value is the current value
            let times: Vec<f64> = (0..20).map(|j| grid.knot(j)).collect();
            let level: f64 = rng.sample(StandardNormal);
            let xs: Vec<f64> = times.iter().map(|_| level + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let w: f64 = rng.sample(StandardNormal);
            let mut budget = -rng.random::<f64>().ln();
            let mut t = f64::INFINITY;
            for j in 0..20 {
                let rate = 0.02 * (xs[j] + w).exp();
                let width = grid.width(j + 1);
                if budget < rate * width {
                    t = grid.knot(j) + budget / rate;
                    break;
                }
                budget -= rate * width;
            }
            let c = rng.random_range(0.0..60.0);
            let path = StepPath::new(times, xs, 1).unwrap();
            SurvivalRecord::new(i.to_string(), t.min(c), t <= c, path, vec![w]).unwrap()
        })
        .collect();
    let fit = fit_cox(&cox_expand(&records, &grid).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let close = fit.beta.iter().all(|b| (b - 1.0).abs() < 0.1);

    let rec = |id: &str, y: f64, d: bool, times: &[f64], xs: &[f64]| {
        SurvivalRecord::new(id, y, d, StepPath::new(times.to_vec(), xs.to_vec(), 1).unwrap(), vec![]).unwrap()
    };
    let hand = [
        rec("a", 1.0, true, &[0.0], &[1.0]),
        rec("b", 2.0, true, &[0.0, 1.0], &[0.0, 3.0]),
        rec("c", 3.0, false, &[0.0], &[2.0]),
    ];
    let rows = cox_expand(&hand, &TimeGrid::even(3.0, 3).unwrap()).map_err(|e| e.to_string())?;
    let b: f64 = 0.5;
    let e = std::f64::consts::E;
    let want = b - (b.exp() + 1.0 + e).ln() + 3.0 * b - ((3.0 * b).exp() + e).ln();
    let got = partial_loglik(&[b], &rows).map_err(|e| e.to_string())?.value;
    check(
        close && (got - want).abs() < 1e-12,
        format!("beta {:.4?}; hand case deviation {:.1e}", fit.beta, (got - want).abs()),
    )
}

fn censoring_rate() -> Outcome {
    let seeds = SeedStreams::new(7);
    let rates: Vec<f64> = (0..20)
        .map(|s| {
            let data = gen_dataset(&SimConfig {
                n: 2000,
                seed: seeds.derive_seed("censoring", &[s]),
                ..SimConfig::default()
            })
            .unwrap();
            data.iter().filter(|r| !r.record.event).count() as f64 / data.len() as f64
        })
        .collect();
    let lo = rates.iter().copied().fold(1.0, f64::min);
    let hi = rates.iter().copied().fold(0.0, f64::max);
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    check(lo >= 0.16 && hi <= 0.24, format!("censoring mean {mean:.4}, range [{lo:.4}, {hi:.4}] over 20 seeds"))
}

fn ibs_properties() -> Outcome {
    let grid = TimeGrid::even(100.0, 250).unwrap();
    let mut rng = rng("ibs", 0);
    let records: Vec<_> = (0..400)
        .map(|i| SurvivalRecord::new(i.to_string(), rng.random_range(0.1..100.0), true, StepPath::empty(), vec![]).unwrap())
        .collect();
    let upper = default_upper(&records).map_err(|e| e.to_string())?;
    let perfect: Vec<_> = records
        .iter()
        .map(|r| {
            let v = grid.knots().iter().map(|&t| f64::from(u8::from(r.time > t))).collect();
            SurvivalCurve::new(grid.knots().to_vec(), v).unwrap()
        })
        .collect();
    let half: Vec<_> = records
        .iter()
        .map(|_| SurvivalCurve::new(grid.knots().to_vec(), vec![0.5; grid.m() + 1]).unwrap())
        .collect();
    let zero = integrated_brier(&perfect, &records, &grid, upper).map_err(|e| e.to_string())?.ibs;
    let quarter = integrated_brier(&half, &records, &grid, upper).map_err(|e| e.to_string())?.ibs;

    let cfg = ExperimentConfig {
        methods: vec!["deeponet-cnn".into(), "cox".into()],
        ..ExperimentConfig::default()
    };
    let data = observed_records(&simulated(&cfg, 0, 0).map_err(|e| e.to_string())?);
    let report = run_cv(&cfg, &data).map_err(|e| e.to_string())?;
    let deep = report.mean("deeponet-cnn").unwrap_or(f64::NAN);
    let cox = report.mean("cox").unwrap_or(f64::NAN);
    check(
        zero == 0.0 && quarter == 0.25 && deep < cox,
        format!("oracle {zero}, constant {quarter}; 5-fold mean IBS deeponet-cnn {deep:.4} vs cox {cox:.4}"),
    )
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let mut cfg = ExperimentConfig {
            replications: 2,
            seed: 11,
            covariate_sets: 3,
            methods: vec!["deeponet-fnn".into(), "deeponet-cnn".into(), "cox".into()],
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        cfg.sim.n = 300;
        cfg.hyper.m = 40;
        cfg.hyper.max_epochs = 20;
        replicate(&cfg).map_err(|e| e.to_string())?;
    }
    let mut same = true;
    for name in ["curves.csv", "bands.csv", "replicate.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
        same &= !a.is_empty() && a == b;
    }
    check(same, "curves.csv, bands.csv and replicate.json compared byte for byte".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("loss oracle equivalence", loss_equivalence),
        ("constant-hazard recovery", constant_hazard_recovery),
        ("simulation curve recovery", curve_recovery),
        ("cox bias", cox_bias),
        ("cox correctness", cox_correctness),
        ("censoring rate", censoring_rate),
        ("integrated brier score", ibs_properties),
        ("replicate determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str()) || *f == (i + 1).to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
