use crate::error::{Result, SurvError};

/// Right-continuous step function of a vector-valued covariate: the value at
/// `t` is the one recorded at the latest sensor time `<= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPath {
    times: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
}

/// Knot times computed as `tau * j / m` and sensor times computed as `i * step`
/// can differ by an ulp or two; lookups allow this much slack.
const TIME_SLACK: f64 = 1e-9;

impl StepPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if values.len() != times.len() * dim {
            return Err(SurvError::Dimension(format!(
                "{} sensor times with dimension {dim} need {} values, got {}",
                times.len(),
                times.len() * dim,
                values.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(SurvError::Data("covariate path holds non-finite entries".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SurvError::Data("sensor times must be strictly increasing".into()));
        }
        Ok(Self { times, values, dim })
    }

    /// A path holding `values` from time 0 onwards.
    pub fn constant(values: &[f64]) -> Self {
        Self {
            times: vec![0.0],
            values: values.to_vec(),
            dim: values.len(),
        }
    }

    /// A path with no time-varying covariates, defined everywhere on `[0, ∞)`.
    pub fn empty() -> Self {
        Self {
            times: vec![0.0],
            values: Vec::new(),
            dim: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn sensor(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `None` before the first sensor.
    pub fn eval(&self, t: f64) -> Option<&[f64]> {
        let limit = t + TIME_SLACK * t.abs().max(1.0);
        let count = self.times.partition_point(|&s| s <= limit);
        (count > 0).then(|| self.sensor(count - 1))
    }

    /// Keeps sensors up to and including `until`.
    pub fn truncated(&self, until: f64) -> StepPath {
        let limit = until + TIME_SLACK * until.abs().max(1.0);
        let keep = self.times.partition_point(|&s| s <= limit).max(1);
        StepPath {
            times: self.times[..keep].to_vec(),
            values: self.values[..keep * self.dim].to_vec(),
            dim: self.dim,
        }
    }
}

/// One subject: observed time, event flag, covariate path and static covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub path: StepPath,
    pub statics: Vec<f64>,
}

impl SurvivalRecord {
    pub fn new(
        id: impl Into<String>,
        time: f64,
        event: bool,
        path: StepPath,
        statics: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if !(time.is_finite() && time >= 0.0) {
            return Err(SurvError::Data(format!("subject `{id}`: observed time {time} must be >= 0")));
        }
        if statics.iter().any(|v| !v.is_finite()) {
            return Err(SurvError::Data(format!("subject `{id}`: non-finite static covariate")));
        }
        Ok(Self {
            id,
            time,
            event,
            path,
            statics,
        })
    }
}

/// Checks that every record shares the same covariate dimensions.
pub fn covariate_dims(records: &[SurvivalRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| SurvError::Data("no records".into()))?;
    let dims = (first.path.dim(), first.statics.len());
    if let Some(bad) = records
        .iter()
        .find(|r| (r.path.dim(), r.statics.len()) != dims)
    {
        return Err(SurvError::Dimension(format!(
            "subject `{}` has covariate dims ({}, {}), expected {:?}",
            bad.id,
            bad.path.dim(),
            bad.statics.len(),
            dims
        )));
    }
    Ok(dims)
}
