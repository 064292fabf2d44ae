use crate::error::{Result, SurvError};
use crate::survloss::{covariate_dims, SurvivalRecord, TimeGrid};

/// One (subject, interval) training row.
///
/// The masked history is not stored per row; it is the subject's sensor block
/// with positions `>= interval` zeroed, see [`ExpandedDataset::masked_history`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandedRow {
    /// Index into the dataset's subjects.
    pub subject: usize,
    /// Interval index `j` in `1..=m`.
    pub interval: usize,
    /// `t_{j-1}`, where the trunk evaluates the log-hazard.
    pub eval_time: f64,
    pub width: f64,
    /// Discrete event flag: set on the interval holding the subject's event.
    pub event: bool,
}

/// Sensor readings `x(t_0) .. x(t_{m-1})` and static covariates of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub id: String,
    /// Position-major `m x tv_dim`; positions the subject never reaches are 0.
    pub sensors: Vec<f64>,
    pub statics: Vec<f64>,
    /// Number of rows this subject contributes (observed sensor count).
    pub observed: usize,
}

/// Every training row of a sample together with the per-subject sensor blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedDataset {
    pub grid: TimeGrid,
    pub tv_dim: usize,
    pub ti_dim: usize,
    pub subjects: Vec<SubjectBlock>,
    pub rows: Vec<ExpandedRow>,
}

impl ExpandedDataset {
    pub fn m(&self) -> usize {
        self.grid.m()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Width of one flattened history: `m * tv_dim`.
    pub fn history_width(&self) -> usize {
        self.m() * self.tv_dim
    }

    /// Writes the row's masked history (`x(t_0) .. x(t_{j-1})`, then zeros) into `out`.
    pub fn write_masked_history(&self, row: &ExpandedRow, out: &mut [f64]) {
        let keep = row.interval * self.tv_dim;
        let sensors = &self.subjects[row.subject].sensors;
        out[..keep].copy_from_slice(&sensors[..keep]);
        out[keep..].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn masked_history(&self, row: &ExpandedRow) -> Vec<f64> {
        let mut out = vec![0.0; self.history_width()];
        self.write_masked_history(row, &mut out);
        out
    }

    pub fn statics(&self, row: &ExpandedRow) -> &[f64] {
        &self.subjects[row.subject].statics
    }

    pub fn event_count(&self) -> usize {
        self.rows.iter().filter(|r| r.event).count()
    }
}

/// Reads the sensor block `x(t_0) .. x(t_{count-1})` off a record's path.
pub(crate) fn read_sensors(
    record: &SurvivalRecord,
    grid: &TimeGrid,
    count: usize,
    out: &mut [f64],
) -> Result<()> {
    let d = record.path.dim();
    for k in 0..count {
        let t = grid.knot(k);
        let v = record.path.eval(t).ok_or_else(|| SurvError::Ingestion {
            subject: record.id.clone(),
            knot: t,
        })?;
        out[k * d..(k + 1) * d].copy_from_slice(v);
    }
    Ok(())
}

/// Expands each subject into one row per interval `j` with `t_{j-1} <= y`.
///
/// The event flag follows `delta_ij = I(t_j > y) * delta`, except that the final
/// interval is closed on the right so an event exactly at `tau` is kept.
pub fn expand_dataset(records: &[SurvivalRecord], grid: &TimeGrid) -> Result<ExpandedDataset> {
    let (tv_dim, ti_dim) = covariate_dims(records)?;
    let m = grid.m();
    let mut subjects = Vec::with_capacity(records.len());
    let mut rows = Vec::new();
    for (si, rec) in records.iter().enumerate() {
        let observed = grid.knots()[..m].partition_point(|&k| k <= rec.time);
        let mut sensors = vec![0.0; m * tv_dim];
        read_sensors(rec, grid, observed, &mut sensors)?;
        for j in 1..=observed {
            let closes = grid.knot(j) > rec.time || (j == m && rec.time <= grid.tau());
            rows.push(ExpandedRow {
                subject: si,
                interval: j,
                eval_time: grid.knot(j - 1),
                width: grid.width(j),
                event: rec.event && closes,
            });
        }
        subjects.push(SubjectBlock {
            id: rec.id.clone(),
            sensors,
            statics: rec.statics.clone(),
            observed,
        });
    }
    Ok(ExpandedDataset {
        grid: grid.clone(),
        tv_dim,
        ti_dim,
        subjects,
        rows,
    })
}
