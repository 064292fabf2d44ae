use crate::error::{Result, SurvError};
use crate::survloss::{ExpandedDataset, ExpandedRow};

/// Log-hazards above this abort training instead of overflowing `exp`.
pub const H_LIMIT: f64 = 700.0;

fn guard(h: f64) -> Result<f64> {
    if h > H_LIMIT {
        return Err(SurvError::Overflow {
            value: h,
            limit: H_LIMIT,
        });
    }
    if !h.is_finite() {
        return Err(SurvError::Data(format!("non-finite log-hazard {h}")));
    }
    Ok(h)
}

/// Discretized negative log-likelihood scaled by the number of subjects:
/// `(1/n) * sum over rows of (exp(h) * width - h * event)`.
pub fn likelihood_loss(h_values: &[f64], data: &ExpandedDataset) -> Result<f64> {
    if h_values.len() != data.rows.len() {
        return Err(SurvError::Dimension(format!(
            "{} log-hazards for {} rows",
            h_values.len(),
            data.rows.len()
        )));
    }
    let n = data.n_subjects();
    if n == 0 {
        return Err(SurvError::Data("empty dataset".into()));
    }
    let mut total = 0.0;
    for (h, row) in h_values.iter().zip(&data.rows) {
        total += row_term(guard(*h)?, row);
    }
    Ok(total / n as f64)
}

#[inline]
fn row_term(h: f64, row: &ExpandedRow) -> f64 {
    let event = if row.event { h } else { 0.0 };
    h.exp() * row.width - event
}

/// `scale * sum(terms)` over a batch and its gradient with respect to each `h`.
pub fn batch_loss_grad(h_values: &[f64], rows: &[&ExpandedRow], scale: f64) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(rows.len());
    for (h, row) in h_values.iter().zip(rows) {
        let h = guard(*h)?;
        total += row_term(h, row);
        let dh = h.exp() * row.width - if row.event { 1.0 } else { 0.0 };
        grad.push(scale * dh);
    }
    Ok((scale * total, grad))
}
