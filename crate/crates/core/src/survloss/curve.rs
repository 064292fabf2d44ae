use crate::error::{Result, SurvError};
use crate::survloss::TimeGrid;

/// Survival probabilities on grid knots: `values[k] = S(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl SurvivalCurve {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() != values.len() || knots.is_empty() {
            return Err(SurvError::Dimension(format!(
                "{} knots vs {} survival values",
                knots.len(),
                values.len()
            )));
        }
        Ok(Self { knots, values })
    }

    /// `S(t_k) = exp(-sum_{j<=k} hazard_j * width_j)` from per-interval hazards.
    pub fn from_interval_hazards(grid: &TimeGrid, hazards: &[f64]) -> Result<Self> {
        if hazards.len() != grid.m() {
            return Err(SurvError::Dimension(format!(
                "{} interval hazards for a {}-interval grid",
                hazards.len(),
                grid.m()
            )));
        }
        let mut values = Vec::with_capacity(grid.m() + 1);
        let mut cum = 0.0;
        values.push(1.0);
        for (j, h) in hazards.iter().enumerate() {
            cum += h * grid.width(j + 1);
            values.push((-cum).exp());
        }
        Self::new(grid.knots().to_vec(), values)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Step evaluation: `S(t_k)` for the last knot `t_k <= t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.knots.partition_point(|&x| x <= t + 1e-12 * t.abs().max(1.0));
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// `S(t_0) = 1`, every value in `(0, 1]`, and nonincreasing.
    pub fn is_valid(&self) -> bool {
        self.values.first() == Some(&1.0)
            && self.values.iter().all(|&v| v > 0.0 && v <= 1.0)
            && self.values.windows(2).all(|w| w[1] <= w[0])
    }
}
