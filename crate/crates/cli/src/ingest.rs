//! Longitudinal CSV input and output.
//!
//! One row per (subject, visit) with columns `id`, `visit_time`, `event_time`,
//! `event_indicator`, then the configured time-varying and static covariate
//! columns. Empty cells are missing values.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use opsurv::simgen::SimRecord;
use opsurv::survloss::{StepPath, SurvivalRecord};
use serde::Serialize;

use crate::config::IngestConfig;
use crate::error::{CliError, Result};

const FIXED: [&str; 4] = ["id", "visit_time", "event_time", "event_indicator"];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows: usize,
    pub subjects: usize,
    pub kept: usize,
    pub missing_baseline_visit: usize,
    pub missing_baseline_value: usize,
}

struct Visit {
    time: f64,
    tv: Vec<Option<f64>>,
    ti: Vec<Option<f64>>,
}

struct Subject {
    id: String,
    time: f64,
    event: bool,
    visits: Vec<Visit>,
}

fn column(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| CliError::Csv {
        path: path.to_string(),
        line: 1,
        msg: format!("missing column `{name}`"),
    })
}

/// Reads subjects in order of first appearance. Visits are sorted, snapped to
/// `grid_step` multiples when configured, and missing values are carried
/// forward from the previous visit. Subjects without a visit at time 0 or
/// without a baseline value for some covariate are dropped.
pub fn ingest_csv(path: &Path, cfg: &IngestConfig) -> Result<(Vec<SurvivalRecord>, IngestReport)> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Csv { path: name.clone(), line: 0, msg: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Csv { path: name.clone(), line: 1, msg: e.to_string() })?
        .clone();
    let fixed: Vec<usize> = FIXED.iter().map(|c| column(&headers, c, &name)).collect::<Result<_>>()?;
    let tv_cols: Vec<usize> = cfg.tv_columns.iter().map(|c| column(&headers, c, &name)).collect::<Result<_>>()?;
    let ti_cols: Vec<usize> = cfg.ti_columns.iter().map(|c| column(&headers, c, &name)).collect::<Result<_>>()?;

    let mut subjects: Vec<Subject> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut report = IngestReport::default();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Csv {
            path: name.clone(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |msg: String| CliError::Csv { path: name.clone(), line, msg };
        let number = |i: usize, what: &str| -> Result<f64> {
            let v: f64 = row[i].parse().map_err(|_| fail(format!("{what} `{}` is not a number", &row[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(fail(format!("{what} is not finite")))
            }
        };
        let optional = |i: usize| -> Result<Option<f64>> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                number(i, &headers[i]).map(Some)
            }
        };
        let id = row[fixed[0]].to_string();
        if id.is_empty() {
            return Err(fail("empty subject id".into()));
        }
        let mut visit_time = number(fixed[1], "visit_time")?;
        let time = number(fixed[2], "event_time")?;
        let event = match &row[fixed[3]] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(fail(format!("event_indicator `{other}` is not 0 or 1"))),
        };
        if time < 0.0 || visit_time < 0.0 {
            return Err(fail("negative time".into()));
        }
        if let Some(step) = cfg.grid_step {
            visit_time = (visit_time / step).round() * step;
        }
        let visit = Visit {
            time: visit_time,
            tv: tv_cols.iter().map(|&i| optional(i)).collect::<Result<_>>()?,
            ti: ti_cols.iter().map(|&i| optional(i)).collect::<Result<_>>()?,
        };
        report.rows += 1;
        match index.get(&id) {
            Some(&k) => {
                let s = &mut subjects[k];
                if s.time != time || s.event != event {
                    return Err(fail(format!("subject `{id}` has conflicting outcomes")));
                }
                s.visits.push(visit);
            }
            None => {
                index.insert(id.clone(), subjects.len());
                subjects.push(Subject { id, time, event, visits: vec![visit] });
            }
        }
    }
    report.subjects = subjects.len();

    let mut records = Vec::with_capacity(subjects.len());
    for mut s in subjects {
        s.visits.sort_by(|a, b| a.time.total_cmp(&b.time));
        if s.visits[0].time > 0.0 {
            warn!("excluding subject `{}`: first visit at {} rather than 0", s.id, s.visits[0].time);
            report.missing_baseline_visit += 1;
            continue;
        }
        let mut current: Vec<Option<f64>> = vec![None; tv_cols.len()];
        let mut times: Vec<f64> = Vec::with_capacity(s.visits.len());
        let mut values: Vec<f64> = Vec::with_capacity(s.visits.len() * tv_cols.len());
        let mut complete = true;
        for v in &s.visits {
            for (c, x) in current.iter_mut().zip(&v.tv) {
                if x.is_some() {
                    *c = *x;
                }
            }
            if current.iter().any(Option::is_none) {
                complete = false;
                break;
            }
            let filled = current.iter().map(|c| c.expect("checked"));
            if times.last() == Some(&v.time) {
                // visits snapped onto one time keep the latest values
                let start = values.len() - tv_cols.len();
                values.truncate(start);
            } else {
                times.push(v.time);
            }
            values.extend(filled);
        }
        let statics: Option<Vec<f64>> = (0..ti_cols.len())
            .map(|c| s.visits.iter().find_map(|v| v.ti[c]))
            .collect();
        let Some(statics) = statics.filter(|_| complete) else {
            warn!("excluding subject `{}`: missing baseline covariate value", s.id);
            report.missing_baseline_value += 1;
            continue;
        };
        let path = StepPath::new(times, values, tv_cols.len())?;
        records.push(SurvivalRecord::new(s.id, s.time, s.event, path, statics)?);
    }
    report.kept = records.len();
    info!(
        "ingested {} rows: {} subjects, {} kept, {} without a baseline visit, {} missing baseline values",
        report.rows, report.subjects, report.kept, report.missing_baseline_visit, report.missing_baseline_value
    );
    Ok((records, report))
}

/// Writes records in the ingestion schema, one row per sensor time.
pub fn export_csv<W: Write>(records: &[SurvivalRecord], cfg: &IngestConfig, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = FIXED.to_vec();
    header.extend(cfg.tv_columns.iter().map(String::as_str));
    header.extend(cfg.ti_columns.iter().map(String::as_str));
    w.write_record(&header).map_err(csv_io)?;
    for r in records {
        if r.path.dim() != cfg.tv_columns.len() || r.statics.len() != cfg.ti_columns.len() {
            return Err(CliError::Validation(format!(
                "subject `{}` has {} + {} covariates but the column lists name {} + {}",
                r.id,
                r.path.dim(),
                r.statics.len(),
                cfg.tv_columns.len(),
                cfg.ti_columns.len()
            )));
        }
        for (k, &t) in r.path.times().iter().enumerate() {
            let mut fields = vec![
                r.id.clone(),
                t.to_string(),
                r.time.to_string(),
                u8::from(r.event).to_string(),
            ];
            fields.extend(r.path.sensor(k).iter().map(f64::to_string));
            fields.extend(r.statics.iter().map(f64::to_string));
            w.write_record(&fields).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Latent draws of simulated subjects, enough to rebuild their true curves.
pub fn export_truth<W: Write>(data: &[SimRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "u", "failure", "censoring", "z", "w", "a1", "a2", "a3", "a4", "a5"])
        .map_err(csv_io)?;
    for s in data {
        let c = &s.covariates;
        let mut fields = vec![
            s.record.id.clone(),
            s.u.to_string(),
            s.failure.to_string(),
            s.censoring.to_string(),
            c.z.to_string(),
            c.w.to_string(),
        ];
        fields.extend(c.alphas.iter().map(f64::to_string));
        w.write_record(&fields).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}
