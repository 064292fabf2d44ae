//! Cox regression with time-varying covariates entered instantaneously:
//! counting-process rows, Breslow partial likelihood, Newton-Raphson and the
//! Breslow baseline hazard.

mod io;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SurvError};
use crate::survloss::{StepPath, SurvivalCurve, SurvivalRecord, TimeGrid};

pub use io::{read_cox, write_cox};

const MAX_ITERATIONS: usize = 100;
const GRAD_TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 40;
/// Relative rounding error of a partial likelihood sum; near the optimum the
/// Newton gain falls below it.
const VALUE_NOISE: f64 = 1e-12;

/// One `(start, stop]` at-risk interval with covariates frozen at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxRow {
    pub subject: usize,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Rows `(t_{j-1}, min(t_j, y)]` for every `t_{j-1} < y`, covariates
/// `(x(t_{j-1}), statics)`. Subjects with `y = 0` contribute nothing.
pub fn cox_expand(records: &[SurvivalRecord], grid: &TimeGrid) -> Result<Vec<CoxRow>> {
    let mut rows = Vec::new();
    for (si, rec) in records.iter().enumerate() {
        let mut j = 1;
        while j <= grid.m() && grid.knot(j - 1) < rec.time {
            let start = grid.knot(j - 1);
            let last = j == grid.m() || grid.knot(j) >= rec.time;
            let stop = if last { rec.time } else { grid.knot(j) };
            let x = rec.path.eval(start).ok_or_else(|| SurvError::Ingestion {
                subject: rec.id.clone(),
                knot: start,
            })?;
            let mut covariates = x.to_vec();
            covariates.extend_from_slice(&rec.statics);
            rows.push(CoxRow {
                subject: si,
                start,
                stop,
                event: last && rec.event,
                covariates,
            });
            j += 1;
        }
    }
    Ok(rows)
}

/// Partial log-likelihood with its gradient and Hessian.
#[derive(Debug, Clone)]
pub struct PartialLik {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Rows grouped by start time, each group sorted by decreasing stop, so a
/// risk set is a union of group prefixes.
struct RiskIndex {
    p: usize,
    /// `(start, row indices by decreasing stop)`.
    groups: Vec<(f64, Vec<usize>)>,
    /// Distinct event times, increasing, with the event rows at each.
    events: Vec<(f64, Vec<usize>)>,
    centered: Vec<DVector<f64>>,
    center: DVector<f64>,
}

impl RiskIndex {
    fn new(rows: &[CoxRow]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.covariates.len());
        if rows.iter().any(|r| r.covariates.len() != p) {
            return Err(SurvError::Dimension("Cox rows have unequal covariate counts".into()));
        }
        if rows.iter().any(|r| !(r.stop > r.start)) {
            return Err(SurvError::Data("Cox row with stop <= start".into()));
        }
        let mut center = DVector::zeros(p);
        for r in rows {
            center += DVector::from_column_slice(&r.covariates);
        }
        if !rows.is_empty() {
            center /= rows.len() as f64;
        }
        let centered = rows
            .iter()
            .map(|r| DVector::from_column_slice(&r.covariates) - &center)
            .collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            rows[a]
                .start
                .total_cmp(&rows[b].start)
                .then(rows[b].stop.total_cmp(&rows[a].stop))
                .then(a.cmp(&b))
        });
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for i in order {
            match groups.last_mut() {
                Some((s, idx)) if *s == rows[i].start => idx.push(i),
                _ => groups.push((rows[i].start, vec![i])),
            }
        }
        let mut ev: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].event).collect();
        ev.sort_by(|&a, &b| rows[a].stop.total_cmp(&rows[b].stop).then(a.cmp(&b)));
        let mut events: Vec<(f64, Vec<usize>)> = Vec::new();
        for i in ev {
            match events.last_mut() {
                Some((t, idx)) if *t == rows[i].stop => idx.push(i),
                _ => events.push((rows[i].stop, vec![i])),
            }
        }
        Ok(Self {
            p,
            groups,
            events,
            centered,
            center,
        })
    }

    /// For each event time: `(S0, S1, S2)` over its risk set, risk scores on
    /// centered covariates.
    fn risk_sums(&self, rows: &[CoxRow], beta: &DVector<f64>) -> Result<Vec<(f64, DVector<f64>, DMatrix<f64>)>> {
        let p = self.p;
        let w: Vec<f64> = self.centered.iter().map(|x| beta.dot(x).exp()).collect();
        // cumulative sums along each group's decreasing-stop order
        let mut cums = Vec::with_capacity(self.groups.len());
        for (_, idx) in &self.groups {
            let mut s0 = Vec::with_capacity(idx.len());
            let mut s1 = Vec::with_capacity(idx.len());
            let mut s2 = Vec::with_capacity(idx.len());
            let (mut a0, mut a1, mut a2) = (0.0, DVector::zeros(p), DMatrix::zeros(p, p));
            for &i in idx {
                let x = &self.centered[i];
                a0 += w[i];
                a1 += x * w[i];
                a2 += x * x.transpose() * w[i];
                s0.push(a0);
                s1.push(a1.clone());
                s2.push(a2.clone());
            }
            cums.push((s0, s1, s2));
        }
        let mut out = Vec::with_capacity(self.events.len());
        for (u, _) in &self.events {
            let (mut s0, mut s1, mut s2) = (0.0, DVector::zeros(p), DMatrix::zeros(p, p));
            for (g, (start, idx)) in self.groups.iter().enumerate() {
                if *start >= *u {
                    break;
                }
                // rows with stop >= u form a prefix of the group
                let n = idx.partition_point(|&i| rows[i].stop >= *u);
                if n > 0 {
                    s0 += cums[g].0[n - 1];
                    s1 += &cums[g].1[n - 1];
                    s2 += &cums[g].2[n - 1];
                }
            }
            if !(s0 > 0.0) {
                return Err(SurvError::Data(format!("empty risk set at event time {u}")));
            }
            out.push((s0, s1, s2));
        }
        Ok(out)
    }

    fn breslow(&self, rows: &[CoxRow], beta: &DVector<f64>) -> Result<Vec<(f64, f64)>> {
        let sums = self.risk_sums(rows, beta)?;
        // centered risk sums are exp(-beta . center) times the uncentered ones
        let rescale = (-beta.dot(&self.center)).exp();
        let mut cum = 0.0;
        Ok(self
            .events
            .iter()
            .zip(&sums)
            .map(|((u, dead), (s0, _, _))| {
                cum += dead.len() as f64 * rescale / s0;
                (*u, cum)
            })
            .collect())
    }

    fn loglik(&self, rows: &[CoxRow], beta: &DVector<f64>) -> Result<PartialLik> {
        let p = self.p;
        let sums = self.risk_sums(rows, beta)?;
        let mut value = 0.0;
        let mut gradient = DVector::zeros(p);
        let mut hessian = DMatrix::zeros(p, p);
        for ((_, dead), (s0, s1, s2)) in self.events.iter().zip(&sums) {
            let d = dead.len() as f64;
            for &i in dead {
                value += beta.dot(&self.centered[i]);
                gradient += &self.centered[i];
            }
            let mean = s1 / *s0;
            value -= d * s0.ln();
            gradient -= &mean * d;
            hessian -= (s2 / *s0 - &mean * mean.transpose()) * d;
        }
        Ok(PartialLik {
            value,
            gradient,
            hessian,
        })
    }
}

/// Breslow partial log-likelihood at `beta`: for each distinct event time
/// `u` with `d` deaths, `sum_{deaths} beta'x - d log sum_{risk set} exp(beta'x)`.
/// The value is invariant to covariate centering, so it is reported on the
/// original scale.
pub fn partial_loglik(beta: &[f64], rows: &[CoxRow]) -> Result<PartialLik> {
    let index = RiskIndex::new(rows)?;
    if beta.len() != index.p {
        return Err(SurvError::Dimension(format!(
            "{} coefficients for {} covariates",
            beta.len(),
            index.p
        )));
    }
    index.loglik(rows, &DVector::from_column_slice(beta))
}

/// Breslow cumulative baseline hazard at `beta`: jumps of
/// `d_k / sum_{risk set} exp(beta'x)` at each distinct event time.
pub fn breslow_baseline(beta: &[f64], rows: &[CoxRow]) -> Result<Vec<(f64, f64)>> {
    let index = RiskIndex::new(rows)?;
    if beta.len() != index.p {
        return Err(SurvError::Dimension(format!(
            "{} coefficients for {} covariates",
            beta.len(),
            index.p
        )));
    }
    index.breslow(rows, &DVector::from_column_slice(beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    /// Distinct event times with the cumulative baseline hazard after each.
    pub baseline: Vec<(f64, f64)>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl CoxFit {
    /// `Lambda_0(t)`, a right-continuous step function with `Lambda_0(0) = 0`.
    pub fn cumulative_baseline(&self, t: f64) -> f64 {
        let k = self.baseline.partition_point(|&(u, _)| u <= t);
        if k == 0 {
            0.0
        } else {
            self.baseline[k - 1].1
        }
    }
}

fn newton_step(hessian: &DMatrix<f64>, gradient: &DVector<f64>) -> Option<DVector<f64>> {
    let neg = -hessian.clone();
    if let Some(ch) = neg.clone().cholesky() {
        return Some(ch.solve(gradient));
    }
    neg.lu().solve(gradient)
}

/// Newton-Raphson from `beta = 0` with step halving, then Breslow increments
/// `d_k / sum_{risk set} exp(beta'x)` at each event time.
pub fn fit_cox(rows: &[CoxRow]) -> Result<CoxFit> {
    let index = RiskIndex::new(rows)?;
    if index.events.is_empty() {
        return Err(SurvError::Data("Cox fit needs at least one event".into()));
    }
    let mut beta = DVector::zeros(index.p);
    let mut current = index.loglik(rows, &beta)?;
    let mut trace = vec![current.gradient.norm()];
    let mut iterations = 0;
    while current.gradient.norm() >= GRAD_TOLERANCE {
        if iterations == MAX_ITERATIONS {
            return Err(SurvError::NonConvergence {
                iterations,
                grad_norm: current.gradient.norm(),
                trace,
            });
        }
        iterations += 1;
        let step = newton_step(&current.hessian, &current.gradient).ok_or_else(|| SurvError::NonConvergence {
            iterations,
            grad_norm: current.gradient.norm(),
            trace: trace.clone(),
        })?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            if let Ok(next) = index.loglik(rows, &candidate) {
                let noise = VALUE_NOISE * current.value.abs().max(1.0);
                let ascent = next.value >= current.value
                    || (next.value >= current.value - noise && next.gradient.norm() < current.gradient.norm());
                if next.value.is_finite() && ascent {
                    accepted = Some((candidate, next));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((b, next)) = accepted else {
            return Err(SurvError::NonConvergence {
                iterations,
                grad_norm: current.gradient.norm(),
                trace,
            });
        };
        beta = b;
        current = next;
        trace.push(current.gradient.norm());
    }
    let baseline = index.breslow(rows, &beta)?;
    Ok(CoxFit {
        beta: beta.iter().copied().collect(),
        baseline,
        iterations,
        grad_norm: current.gradient.norm(),
    })
}

/// `S(t_k) = exp(-sum_{u <= t_k} dLambda_0(u) exp(beta'x))`, with the
/// time-varying covariate read at the knot `t_{j-1}` of the interval
/// `(t_{j-1}, t_j]` holding `u`.
pub fn cox_predict_survival(fit: &CoxFit, path: &StepPath, statics: &[f64], grid: &TimeGrid) -> Result<SurvivalCurve> {
    if path.dim() + statics.len() != fit.beta.len() {
        return Err(SurvError::Dimension(format!(
            "{} covariates for {} coefficients",
            path.dim() + statics.len(),
            fit.beta.len()
        )));
    }
    let d = path.dim();
    let static_part: f64 = fit.beta[d..].iter().zip(statics).map(|(b, z)| b * z).sum();
    let mut risk = Vec::with_capacity(grid.m());
    for j in 1..=grid.m() {
        let t = grid.knot(j - 1);
        let x = path.eval(t).ok_or_else(|| SurvError::Ingestion {
            subject: "<prediction>".into(),
            knot: t,
        })?;
        let eta: f64 = fit.beta[..d].iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + static_part;
        risk.push(eta.exp());
    }
    let mut values = Vec::with_capacity(grid.m() + 1);
    values.push(1.0);
    let mut cum = 0.0;
    let mut prev = 0.0;
    let mut e = 0;
    for k in 1..=grid.m() {
        let tk = grid.knot(k);
        while e < fit.baseline.len() && fit.baseline[e].0 <= tk {
            let (u, lam) = fit.baseline[e];
            if u > 0.0 {
                cum += (lam - prev) * risk[grid.interval_of(u) - 1];
            }
            prev = lam;
            e += 1;
        }
        values.push((-cum).exp());
    }
    SurvivalCurve::new(grid.knots().to_vec(), values)
}
