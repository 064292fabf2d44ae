use std::io::{BufRead, Write};

use super::CoxFit;
use crate::error::{Result, SurvError};

const MAGIC: &str = "OPSURV-COX 1";

/// Flat text export: coefficients, then event time and cumulative baseline
/// hazard pairs, one per line.
pub fn write_cox<W: Write>(fit: &CoxFit, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "iterations {} grad_norm {:e}", fit.iterations, fit.grad_norm)?;
    write!(out, "beta {}", fit.beta.len())?;
    for b in &fit.beta {
        write!(out, " {b:e}")?;
    }
    writeln!(out)?;
    writeln!(out, "baseline {}", fit.baseline.len())?;
    for (u, lam) in &fit.baseline {
        writeln!(out, "{u:e} {lam:e}")?;
    }
    writeln!(out, "end")?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> SurvError {
    SurvError::Format(msg.into())
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("bad {what}")))
}

pub fn read_cox<R: BufRead>(input: R) -> Result<CoxFit> {
    let mut lines = input.lines();
    let mut next = move || -> Result<String> { lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(Into::into) };
    if next()?.trim() != MAGIC {
        return Err(bad("not a Cox fit file"));
    }
    let line = next()?;
    let mut t = line.split_whitespace();
    if t.next() != Some("iterations") {
        return Err(bad("missing iterations"));
    }
    let iterations = parse(t.next(), "iterations")?;
    if t.next() != Some("grad_norm") {
        return Err(bad("missing grad_norm"));
    }
    let grad_norm = parse(t.next(), "grad_norm")?;

    let line = next()?;
    let mut t = line.split_whitespace();
    if t.next() != Some("beta") {
        return Err(bad("missing beta"));
    }
    let p: usize = parse(t.next(), "coefficient count")?;
    let beta = t.map(|s| parse(Some(s), "coefficient")).collect::<Result<Vec<f64>>>()?;
    if beta.len() != p {
        return Err(bad(format!("expected {p} coefficients, found {}", beta.len())));
    }

    let line = next()?;
    let mut t = line.split_whitespace();
    if t.next() != Some("baseline") {
        return Err(bad("missing baseline"));
    }
    let k: usize = parse(t.next(), "baseline count")?;
    let mut baseline = Vec::with_capacity(k);
    for _ in 0..k {
        let line = next()?;
        let mut t = line.split_whitespace();
        baseline.push((parse(t.next(), "event time")?, parse(t.next(), "cumulative hazard")?));
    }
    if next()?.trim() != "end" {
        return Err(bad("missing end marker"));
    }
    Ok(CoxFit {
        beta,
        baseline,
        iterations,
        grad_norm,
    })
}
