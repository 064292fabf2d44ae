//! Curve tables, bands and JSON reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use opsurv::evalmetrics::{curve_error, quantile};
use opsurv::survloss::SurvivalCurve;
use serde::Serialize;

use crate::error::Result;
use crate::ingest::csv_io;

/// Replication curves keyed by `(method, covariate set)`, all on one grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveTable {
    pub knots: Vec<f64>,
    pub curves: BTreeMap<(String, usize), Vec<(usize, Vec<f64>)>>,
    pub truth: BTreeMap<usize, Vec<f64>>,
}

/// Pointwise mean and empirical 5% / 95% quantiles across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    pub fn width(&self) -> f64 {
        let total: f64 = self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum();
        total / self.upper.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetSummary {
    pub covariate_set: usize,
    pub replications: usize,
    /// Mean absolute error of the replication-mean curve against the truth.
    pub mean_curve_error: f64,
    pub band_width: f64,
    pub replication_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub sets: Vec<SetSummary>,
    pub mean_error: f64,
    pub mean_band_width: f64,
}

impl CurveTable {
    pub fn insert(&mut self, method: &str, set: usize, replication: usize, curve: &SurvivalCurve) {
        if self.knots.is_empty() {
            self.knots = curve.knots().to_vec();
        }
        self.curves
            .entry((method.to_string(), set))
            .or_default()
            .push((replication, curve.values().to_vec()));
    }

    pub fn band(&self, method: &str, set: usize) -> Option<Band> {
        let reps = self.curves.get(&(method.to_string(), set))?;
        let k = self.knots.len();
        let mut band = Band {
            mean: Vec::with_capacity(k),
            lower: Vec::with_capacity(k),
            upper: Vec::with_capacity(k),
        };
        for j in 0..k {
            let column: Vec<f64> = reps.iter().map(|(_, v)| v[j]).collect();
            band.mean.push(column.iter().sum::<f64>() / column.len() as f64);
            band.lower.push(quantile(&column, 0.05).expect("nonempty"));
            band.upper.push(quantile(&column, 0.95).expect("nonempty"));
        }
        Some(band)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.curves.keys().map(|(m, _)| m.clone()).collect();
        m.dedup();
        m
    }

    /// Per-method errors against the truth, for sets that have one.
    pub fn summarize(&self) -> Vec<MethodSummary> {
        let curve = |v: &[f64]| SurvivalCurve::new(self.knots.clone(), v.to_vec()).expect("matching knots");
        self.methods()
            .into_iter()
            .map(|method| {
                let mut sets = Vec::new();
                for (&set, truth) in &self.truth {
                    let Some(band) = self.band(&method, set) else { continue };
                    let truth = curve(truth);
                    let reps = &self.curves[&(method.clone(), set)];
                    sets.push(SetSummary {
                        covariate_set: set,
                        replications: reps.len(),
                        mean_curve_error: curve_error(&curve(&band.mean), &truth),
                        band_width: band.width(),
                        replication_errors: reps.iter().map(|(_, v)| curve_error(&curve(v), &truth)).collect(),
                    });
                }
                let n = sets.len().max(1) as f64;
                MethodSummary {
                    mean_error: sets.iter().map(|s| s.mean_curve_error).sum::<f64>() / n,
                    mean_band_width: sets.iter().map(|s| s.band_width).sum::<f64>() / n,
                    method,
                    sets,
                }
            })
            .collect()
    }

    /// Long format: `method, covariate_set, replication, t, S`.
    pub fn write_curves<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "covariate_set", "replication", "t", "S"]).map_err(csv_io)?;
        for ((method, set), reps) in &self.curves {
            for (r, values) in reps {
                for (t, s) in self.knots.iter().zip(values) {
                    w.write_record([method.clone(), set.to_string(), r.to_string(), t.to_string(), s.to_string()])
                        .map_err(csv_io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `method, covariate_set, t, mean, lower, upper, truth` with the 5% and
    /// 95% quantiles as the band.
    pub fn write_bands<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "covariate_set", "t", "mean", "lower", "upper", "truth"]).map_err(csv_io)?;
        for (method, set) in self.curves.keys() {
            let band = self.band(method, *set).expect("present");
            let truth = self.truth.get(set);
            for (j, t) in self.knots.iter().enumerate() {
                w.write_record([
                    method.clone(),
                    set.to_string(),
                    t.to_string(),
                    band.mean[j].to_string(),
                    band.lower[j].to_string(),
                    band.upper[j].to_string(),
                    truth.map_or(String::new(), |v| v[j].to_string()),
                ])
                .map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `id, t, S` rows for a set of named curves.
pub fn write_named_curves<W: Write>(curves: &[(String, SurvivalCurve)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "t", "S"]).map_err(csv_io)?;
    for (id, c) in curves {
        for (t, s) in c.knots().iter().zip(c.values()) {
            w.write_record([id.clone(), t.to_string(), s.to_string()]).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}
