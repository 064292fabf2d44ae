//! Censoring-weighted Brier scores, their time integral, curve errors
//! against known truth and k-fold splits.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};
use crate::survloss::{SurvivalCurve, SurvivalRecord, TimeGrid};

/// Reverse Kaplan–Meier estimate of the censoring survival function `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringEstimate {
    /// Distinct censoring times, increasing.
    times: Vec<f64>,
    /// `G` just after each time.
    values: Vec<f64>,
}

impl CensoringEstimate {
    /// Right-continuous `G(t)`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&u| u <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// `G(t-)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&u| u < t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.values.iter().copied())
    }
}

/// Kaplan–Meier with censorings as the events. Subjects failing at a
/// censoring time count as still at risk for it.
pub fn km_censoring(records: &[SurvivalRecord]) -> CensoringEstimate {
    let mut obs: Vec<(f64, bool)> = records.iter().map(|r| (r.time, r.event)).collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = obs.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut g = 1.0;
    let mut i = 0;
    while i < n {
        let t = obs[i].0;
        let mut j = i;
        let mut censored = 0usize;
        while j < n && obs[j].0 == t {
            censored += usize::from(!obs[j].1);
            j += 1;
        }
        if censored > 0 {
            g *= 1.0 - censored as f64 / (n - i) as f64;
            times.push(t);
            values.push(g);
        }
        i = j;
    }
    CensoringEstimate { times, values }
}

/// Inverse-probability-of-censoring weighted Brier score at `t`.
pub fn brier_score(curves: &[SurvivalCurve], records: &[SurvivalRecord], t: f64, g: &CensoringEstimate) -> Result<f64> {
    if curves.len() != records.len() {
        return Err(SurvError::Dimension(format!(
            "{} curves for {} subjects",
            curves.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(SurvError::Data("Brier score needs at least one subject".into()));
    }
    let gt = g.at(t);
    let mut total = 0.0;
    for (curve, r) in curves.iter().zip(records) {
        let s = curve.at(t);
        if r.time <= t && r.event {
            let gy = g.left_limit(r.time);
            if !(gy > 0.0) {
                return Err(SurvError::EvaluationRange(format!("censoring estimate is 0 before y = {}", r.time)));
            }
            total += s * s / gy;
        } else if r.time > t {
            if !(gt > 0.0) {
                return Err(SurvError::EvaluationRange(format!("censoring estimate is 0 at t = {t}")));
            }
            total += (1.0 - s) * (1.0 - s) / gt;
        }
    }
    Ok(total / records.len() as f64)
}

/// Type-7 sample quantile.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(SurvError::Data("quantile of an empty sample or outside [0, 1]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Default integration limit: the 90th percentile of observed times.
pub fn default_upper(records: &[SurvivalRecord]) -> Result<f64> {
    quantile(&records.iter().map(|r| r.time).collect::<Vec<_>>(), 0.9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbsResult {
    pub ibs: f64,
    /// Limit actually integrated to.
    pub upper: f64,
    pub requested_upper: f64,
    pub truncated: bool,
}

/// `(1/u) * integral_0^u BS(t) dt` by the trapezoid rule on the grid knots,
/// where `u` is the last knot not above `upper` and `G` is estimated on
/// `records`. When `G` reaches 0 first, integration stops at the last usable
/// knot.
pub fn integrated_brier(
    curves: &[SurvivalCurve],
    records: &[SurvivalRecord],
    grid: &TimeGrid,
    upper: f64,
) -> Result<IbsResult> {
    if !(upper > 0.0 && upper <= grid.tau() * (1.0 + 1e-12)) {
        return Err(SurvError::EvaluationRange(format!(
            "integration limit {upper} outside (0, {}]",
            grid.tau()
        )));
    }
    let g = km_censoring(records);
    let points: Vec<f64> = grid
        .knots()
        .iter()
        .copied()
        .filter(|&t| t <= upper * (1.0 + 1e-12))
        .collect();
    let mut used = vec![(points[0], brier_score(curves, records, points[0], &g)?)];
    let mut truncated = false;
    for &t in &points[1..] {
        match brier_score(curves, records, t, &g) {
            Ok(bs) => used.push((t, bs)),
            Err(SurvError::EvaluationRange(msg)) => {
                warn!("integrated Brier score truncated at t = {}: {msg}", used.last().map_or(0.0, |p| p.0));
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let end = used.last().map_or(0.0, |p| p.0);
    if !(end > 0.0) {
        return Err(SurvError::EvaluationRange("no positive integration range".into()));
    }
    let area: f64 = used.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(IbsResult {
        ibs: area / end,
        upper: end,
        requested_upper: upper,
        truncated,
    })
}

/// Mean absolute difference over the knots of `pred`, reading `truth` by
/// step interpolation.
pub fn curve_error(pred: &SurvivalCurve, truth: &SurvivalCurve) -> f64 {
    let k = pred.knots();
    let total: f64 = k.iter().zip(pred.values()).map(|(&t, &s)| (s - truth.at(t)).abs()).sum();
    total / k.len() as f64
}

/// Per-subject fold index in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold: Vec<usize>,
}

impl FoldAssignment {
    /// `(train, test)` subject indices for one fold.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold.len()).partition(|&i| self.fold[i] != f)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold {
            s[f] += 1;
        }
        s
    }
}

/// Shuffles subject positions, then deals them round-robin into `k` folds.
pub fn kfold_split<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<FoldAssignment> {
    if k < 2 || n < k {
        return Err(SurvError::Config(format!("cannot split {n} subjects into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(FoldAssignment { k, fold })
}
