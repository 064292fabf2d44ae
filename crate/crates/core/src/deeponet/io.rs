use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::branch::BranchRegistry;
use super::hyper::{HyperParams, InputDims};
use super::model::{DeepOnet, FittedDeepOnet};
use super::scaler::Standardizer;
use crate::error::{Result, SurvError};
use crate::survloss::TimeGrid;

const MAGIC: &str = "OPSURV-MODEL 1";

fn fmt_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

fn write_vec<W: Write>(out: &mut W, key: &str, values: &[f64]) -> Result<()> {
    writeln!(out, "{key} {} {}", values.len(), fmt_values(values))?;
    Ok(())
}

/// Writes a fitted model as text. Floats use the shortest exact decimal form,
/// so write-read-write reproduces the file byte for byte.
pub fn write_model<W: Write>(model: &FittedDeepOnet, mut out: W) -> Result<()> {
    let net = &model.net;
    let dims = net.dims();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "variant {}", net.variant())?;
    writeln!(out, "tau {:e}", model.grid.tau())?;
    writeln!(out, "m {}", model.grid.m())?;
    writeln!(out, "tv_dim {}", dims.tv_dim)?;
    writeln!(out, "ti_dim {}", dims.ti_dim)?;
    let hyper = serde_json::to_string(net.hyper()).map_err(|e| SurvError::Format(e.to_string()))?;
    writeln!(out, "hyper {hyper}")?;
    write_vec(&mut out, "knots", model.grid.knots())?;
    write_vec(&mut out, "scaler.tv_mean", &model.scaler.tv_mean)?;
    write_vec(&mut out, "scaler.tv_sd", &model.scaler.tv_sd)?;
    write_vec(&mut out, "scaler.ti_mean", &model.scaler.ti_mean)?;
    write_vec(&mut out, "scaler.ti_sd", &model.scaler.ti_sd)?;
    writeln!(out, "tensors {}", net.params.len())?;
    for (name, t) in net.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {name} {}", shape.join("x"))?;
        writeln!(out, "{}", fmt_values(t.values()))?;
    }
    writeln!(out, "end")?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> SurvError {
        SurvError::Format(format!("model file line {}: {msg}", self.line_no))
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.to_string()),
            _ => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.trim().parse().map_err(|_| self.err(format!("bad integer for `{key}`")))
    }

    fn floats(&self, text: &str) -> Result<Vec<f64>> {
        text.split_whitespace()
            .map(|tok| match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(self.err(format!("bad number `{tok}`"))),
            })
            .collect()
    }

    fn vec(&mut self, key: &str) -> Result<Vec<f64>> {
        let rest = self.keyed(key)?;
        let (count, values) = rest.split_once(' ').unwrap_or((rest.as_str(), ""));
        let count: usize = count.parse().map_err(|_| self.err("bad vector length"))?;
        let values = self.floats(values)?;
        if values.len() != count {
            return Err(self.err(format!("`{key}` declares {count} values, found {}", values.len())));
        }
        Ok(values)
    }
}

pub fn read_model<R: BufRead>(input: R, registry: &BranchRegistry) -> Result<FittedDeepOnet> {
    let mut lines = Lines {
        inner: input.lines(),
        line_no: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err("not an opsurv model file"));
    }
    let variant = lines.keyed("variant")?;
    let tau = lines.keyed("tau")?;
    let tau = lines.floats(&tau)?.first().copied().ok_or_else(|| lines.err("missing tau"))?;
    let m = lines.usize("m")?;
    let tv_dim = lines.usize("tv_dim")?;
    let ti_dim = lines.usize("ti_dim")?;
    let hyper: HyperParams = serde_json::from_str(&lines.keyed("hyper")?)
        .map_err(|e| lines.err(format!("hyperparameters: {e}")))?;
    let grid = TimeGrid::from_knots(lines.vec("knots")?)?;
    if grid.m() != m || grid.tau() != tau {
        return Err(lines.err("knots disagree with tau and m"));
    }
    let scaler = Standardizer {
        tv_mean: lines.vec("scaler.tv_mean")?,
        tv_sd: lines.vec("scaler.tv_sd")?,
        ti_mean: lines.vec("scaler.ti_mean")?,
        ti_sd: lines.vec("scaler.ti_sd")?,
    };
    if scaler.tv_mean.len() != tv_dim || scaler.tv_sd.len() != tv_dim || scaler.ti_mean.len() != ti_dim || scaler.ti_sd.len() != ti_dim {
        return Err(lines.err("standardization constants disagree with covariate counts"));
    }
    let dims = InputDims { m, tv_dim, ti_dim };
    let mut net = DeepOnet::build(registry, &variant, dims, &hyper, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = lines.usize("tensors")?;
    if count != net.params.len() {
        return Err(lines.err(format!("{count} tensors, architecture has {}", net.params.len())));
    }
    for _ in 0..count {
        let header = lines.keyed("tensor")?;
        let (name, shape) = header.split_once(' ').ok_or_else(|| lines.err("bad tensor header"))?;
        let id = net.params.find(name).ok_or_else(|| lines.err(format!("unknown tensor `{name}`")))?;
        let expected: Vec<String> = net.params.get(id).shape().iter().map(|d| d.to_string()).collect();
        if shape != expected.join("x") {
            return Err(lines.err(format!("tensor `{name}` has shape {shape}, expected {}", expected.join("x"))));
        }
        let values = lines.next()?;
        let values = lines.floats(&values)?;
        let target = net.params.get_mut(id).values_mut();
        if values.len() != target.len() {
            return Err(lines.err(format!("tensor `{name}` holds {} values, expected {}", values.len(), target.len())));
        }
        target.copy_from_slice(&values);
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    Ok(FittedDeepOnet { net, scaler, grid })
}
