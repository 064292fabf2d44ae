//! Cumulative-effect simulation: Fourier covariate paths, a hazard driven by
//! the running integral of the path, inverse-transform failure times and
//! capped exponential censoring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};
use crate::seeds::{SeedStreams, SIMDATA};
use crate::survloss::{StepPath, SurvivalCurve, SurvivalRecord, TimeGrid};

/// Index prefix that keeps covariate-set streams apart from subject streams.
const COVSET_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub fine_step: f64,
    pub tau: f64,
    pub hazard_scale: f64,
    /// Coefficient on the running integral of `x`.
    pub coef_linear: f64,
    /// Coefficient on the running integral of `x^2 z`.
    pub coef_quadratic: f64,
    pub w_effect: f64,
    pub z_effect: f64,
    /// Mean of the exponential censoring draw.
    pub censor_mean: f64,
    pub censor_cap: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            fine_step: 0.1,
            tau: 100.0,
            hazard_scale: 0.05,
            coef_linear: 0.01,
            coef_quadratic: 0.01,
            w_effect: 1.0,
            z_effect: 1.0,
            censor_mean: 50.0,
            censor_cap: 99.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fine_step", self.fine_step),
            ("tau", self.tau),
            ("hazard_scale", self.hazard_scale),
            ("censor_mean", self.censor_mean),
            ("censor_cap", self.censor_cap),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SurvError::Config(format!("simulation `{name}` must be positive")));
            }
        }
        for (name, v) in [
            ("coef_linear", self.coef_linear),
            ("coef_quadratic", self.coef_quadratic),
            ("w_effect", self.w_effect),
            ("z_effect", self.z_effect),
        ] {
            if !v.is_finite() {
                return Err(SurvError::Config(format!("simulation `{name}` must be finite")));
            }
        }
        if self.fine_step > self.tau {
            return Err(SurvError::Config("fine_step exceeds tau".into()));
        }
        Ok(())
    }

    /// Fine grid `0, ds, 2 ds, ..., tau`, each point computed as `tau * i / N` so
    /// it is bit-identical to any evenly built knot at the same position.
    pub fn fine_times(&self) -> Vec<f64> {
        let steps = (self.tau / self.fine_step).round() as usize;
        (0..=steps).map(|i| self.tau * i as f64 / steps as f64).collect()
    }
}

/// Covariate draws for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub alphas: [f64; 5],
    pub z: f64,
    pub w: f64,
}

impl Covariates {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut alphas = [0.0; 5];
        for a in &mut alphas {
            *a = rng.random::<f64>();
        }
        let z = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let w: f64 = rng.sample(StandardNormal);
        Self { alphas, z, w }
    }

    pub fn with_z(&self, z: f64) -> Self {
        Self { z, ..self.clone() }
    }

    /// Static covariates in record order `(z, w)`.
    pub fn statics(&self) -> Vec<f64> {
        vec![self.z, self.w]
    }
}

/// `a1 + a2 sin(2 pi t/tau) + a3 cos(2 pi t/tau) + a4 sin(4 pi t/tau) + a5 cos(4 pi t/tau)`.
pub fn fourier_value(alphas: &[f64; 5], t: f64, tau: f64) -> f64 {
    let u = 2.0 * std::f64::consts::PI * t / tau;
    alphas[0] + alphas[1] * u.sin() + alphas[2] * u.cos() + alphas[3] * (2.0 * u).sin() + alphas[4] * (2.0 * u).cos()
}

/// The covariate path sampled on the fine grid, as a step function.
pub fn gen_covariate_path(alphas: &[f64; 5], config: &SimConfig) -> StepPath {
    let times = config.fine_times();
    let values = times.iter().map(|&t| fourier_value(alphas, t, config.tau)).collect();
    StepPath::new(times, values, 1).expect("fine grid is increasing")
}

/// Hazard at every fine-grid point; the sums run over `s <= t` inclusive.
pub fn true_hazard(path_values: &[f64], z: f64, w: f64, config: &SimConfig) -> Vec<f64> {
    let ds = config.fine_step;
    let mut lin = 0.0;
    let mut quad = 0.0;
    path_values
        .iter()
        .map(|&x| {
            lin += x * ds;
            quad += x * x * z * ds;
            config.hazard_scale
                * (config.w_effect * w + config.z_effect * z + config.coef_linear * lin + config.coef_quadratic * quad)
                    .exp()
        })
        .collect()
}

/// `S(t) = exp(-ds * sum_{s<=t} lambda(s))` on the fine grid.
pub fn true_survival(hazard: &[f64], fine_step: f64) -> Vec<f64> {
    let mut cum = 0.0;
    hazard
        .iter()
        .map(|l| {
            cum += l * fine_step;
            (-cum).exp()
        })
        .collect()
}

/// `T = sup{t : S(t) >= u}` over the fine grid, 0 when no point qualifies.
pub fn sample_failure(u: f64, times: &[f64], survival: &[f64]) -> f64 {
    let k = survival.partition_point(|&s| s >= u);
    if k == 0 {
        0.0
    } else {
        times[k - 1]
    }
}

pub fn sample_censoring<R: Rng + ?Sized>(rng: &mut R, config: &SimConfig) -> f64 {
    let e: f64 = Exp::new(1.0 / config.censor_mean).expect("positive rate").sample(rng);
    e.min(config.censor_cap)
}

/// Fine-grid truth for one covariate draw.
pub fn truth_for(cov: &Covariates, config: &SimConfig) -> (StepPath, Vec<f64>) {
    let path = gen_covariate_path(&cov.alphas, config);
    let hazard = true_hazard(path.values(), cov.z, cov.w, config);
    let survival = true_survival(&hazard, config.fine_step);
    (path, survival)
}

/// Resamples a fine-grid truth onto `grid`: `S(t_0) = 1` (the left limit at
/// 0) and the fine-grid value at the latest fine point `<= t_k` elsewhere.
pub fn truth_on_grid(fine_times: &[f64], survival: &[f64], grid: &TimeGrid) -> Result<SurvivalCurve> {
    let values = grid
        .knots()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            if k == 0 {
                return 1.0;
            }
            let i = fine_times.partition_point(|&s| s <= t + 1e-9 * t.abs().max(1.0));
            if i == 0 {
                1.0
            } else {
                survival[i - 1]
            }
        })
        .collect();
    SurvivalCurve::new(grid.knots().to_vec(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    /// Observed data with the full covariate path on `[0, tau]`.
    pub record: SurvivalRecord,
    pub covariates: Covariates,
    pub u: f64,
    pub failure: f64,
    pub censoring: f64,
    /// True `S` on the fine grid.
    pub truth: Vec<f64>,
}

impl SimRecord {
    /// The record as it would be observed: covariates only up to `y`.
    pub fn observed(&self) -> SurvivalRecord {
        SurvivalRecord {
            path: self.record.path.truncated(self.record.time),
            ..self.record.clone()
        }
    }
}

fn gen_subject(config: &SimConfig, seeds: &SeedStreams, i: usize, times: &[f64]) -> Result<SimRecord> {
    let mut rng = seeds.rng(SIMDATA, &[i as u64, 0]);
    let mut censor_rng = seeds.rng(SIMDATA, &[i as u64, 1]);
    let covariates = Covariates::draw(&mut rng);
    let u: f64 = rng.random();
    let (path, truth) = truth_for(&covariates, config);
    let failure = sample_failure(u, times, &truth);
    let censoring = sample_censoring(&mut censor_rng, config);
    let event = failure <= censoring;
    let time = if event { failure } else { censoring };
    let record = SurvivalRecord::new(format!("s{i}"), time, event, path, covariates.statics())?;
    Ok(SimRecord {
        record,
        covariates,
        u,
        failure,
        censoring,
        truth,
    })
}

/// `n` independent subjects; subject `i` draws from its own streams, so the
/// result does not depend on generation order.
pub fn gen_dataset(config: &SimConfig) -> Result<Vec<SimRecord>> {
    config.validate()?;
    let seeds = SeedStreams::new(config.seed);
    let times = config.fine_times();
    (0..config.n).map(|i| gen_subject(config, &seeds, i, &times)).collect()
}

/// Observed records of a simulated dataset.
pub fn observed_records(data: &[SimRecord]) -> Vec<SurvivalRecord> {
    data.iter().map(SimRecord::observed).collect()
}

/// A fixed covariate draw used for curve comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    pub index: usize,
    pub covariates: Covariates,
    pub path: StepPath,
}

impl CovariateSet {
    pub fn truth(&self, config: &SimConfig, grid: &TimeGrid) -> Result<SurvivalCurve> {
        let (_, fine) = truth_for(&self.covariates, config);
        truth_on_grid(&config.fine_times(), &fine, grid)
    }
}

pub fn covariate_sets(config: &SimConfig, seeds: &SeedStreams, count: usize) -> Vec<CovariateSet> {
    (0..count)
        .map(|k| {
            let mut rng = seeds.rng(SIMDATA, &[COVSET_STREAM, k as u64]);
            let covariates = Covariates::draw(&mut rng);
            let path = gen_covariate_path(&covariates.alphas, config);
            CovariateSet {
                index: k,
                covariates,
                path,
            }
        })
        .collect()
}
