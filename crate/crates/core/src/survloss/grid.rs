use crate::error::{Result, SurvError};
use crate::survloss::SurvivalRecord;

/// Partition `0 = t_0 < t_1 < ... < t_m = tau` of the follow-up window.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// `m` equal intervals on `[0, tau]`.
    pub fn even(tau: f64, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(SurvError::Config("grid needs at least one interval".into()));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(SurvError::Config(format!("grid upper bound {tau} must be positive")));
        }
        let mut knots: Vec<f64> = (0..=m).map(|j| tau * j as f64 / m as f64).collect();
        knots[m] = tau;
        Ok(Self { knots })
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 {
            return Err(SurvError::Config("knots must start at 0 and hold at least two points".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) || knots.iter().any(|k| !k.is_finite()) {
            return Err(SurvError::Config("knots must be finite and strictly increasing".into()));
        }
        Ok(Self { knots })
    }

    /// Number of intervals.
    pub fn m(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn tau(&self) -> f64 {
        self.knots[self.m()]
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot(&self, j: usize) -> f64 {
        self.knots[j]
    }

    /// Width of interval `j` in `1..=m`.
    pub fn width(&self, j: usize) -> f64 {
        self.knots[j] - self.knots[j - 1]
    }

    /// Interval `j` with `t` in `(t_{j-1}, t_j]`; `t <= 0` maps to 1 and
    /// `t > tau` to `m`.
    pub fn interval_of(&self, t: f64) -> usize {
        let j = self.knots.partition_point(|&k| k < t);
        j.clamp(1, self.m())
    }
}

/// Even grid over `[0, tau]` where `tau` is the override or the largest
/// observed event time.
pub fn build_grid(records: &[SurvivalRecord], m: usize, tau_override: Option<f64>) -> Result<TimeGrid> {
    if records.is_empty() {
        return Err(SurvError::Config("cannot build a grid without records".into()));
    }
    let tau = match tau_override {
        Some(t) => t,
        None => records
            .iter()
            .filter(|r| r.event)
            .map(|r| r.time)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
            .ok_or_else(|| {
                SurvError::Config("no observed events and no tau override: grid upper bound undefined".into())
            })?,
    };
    TimeGrid::even(tau, m)
}
