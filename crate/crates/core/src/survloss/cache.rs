//! Columnar binary cache for expanded datasets.
//!
//! Layout (little endian): magic `OPSURVX\0`, format version `u32`, then the
//! schema header (`m`, `tv_dim`, `ti_dim`, subject count, row count as `u64`),
//! the `m + 1` grid knots, per-subject blocks (id length and UTF-8 bytes,
//! observed count, sensors, statics), and finally the row columns in order:
//! subject, interval, eval time, width, event flag.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, SurvError};
use crate::survloss::{ExpandedDataset, ExpandedRow, SubjectBlock, TimeGrid};

pub const CACHE_MAGIC: &[u8; 8] = b"OPSURVX\0";
pub const CACHE_VERSION: u32 = 1;

pub fn write_cache<W: Write>(data: &ExpandedDataset, mut out: W) -> Result<()> {
    out.write_all(CACHE_MAGIC)?;
    out.write_u32::<LittleEndian>(CACHE_VERSION)?;
    for v in [
        data.m(),
        data.tv_dim,
        data.ti_dim,
        data.subjects.len(),
        data.rows.len(),
    ] {
        out.write_u64::<LittleEndian>(v as u64)?;
    }
    for k in data.grid.knots() {
        out.write_f64::<LittleEndian>(*k)?;
    }
    for s in &data.subjects {
        out.write_u64::<LittleEndian>(s.id.len() as u64)?;
        out.write_all(s.id.as_bytes())?;
        out.write_u64::<LittleEndian>(s.observed as u64)?;
        for v in s.sensors.iter().chain(&s.statics) {
            out.write_f64::<LittleEndian>(*v)?;
        }
    }
    for r in &data.rows {
        out.write_u64::<LittleEndian>(r.subject as u64)?;
    }
    for r in &data.rows {
        out.write_u64::<LittleEndian>(r.interval as u64)?;
    }
    for r in &data.rows {
        out.write_f64::<LittleEndian>(r.eval_time)?;
    }
    for r in &data.rows {
        out.write_f64::<LittleEndian>(r.width)?;
    }
    for r in &data.rows {
        out.write_u8(u8::from(r.event))?;
    }
    out.flush()?;
    Ok(())
}

fn read_len<R: Read>(input: &mut R) -> Result<usize> {
    let v = input.read_u64::<LittleEndian>()?;
    usize::try_from(v).map_err(|_| SurvError::Format(format!("length {v} out of range")))
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    input.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

pub fn read_cache<R: Read>(mut input: R) -> Result<ExpandedDataset> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(SurvError::Format("not an expanded-row cache (bad magic)".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(SurvError::Format(format!("unsupported cache version {version}")));
    }
    let m = read_len(&mut input)?;
    let tv_dim = read_len(&mut input)?;
    let ti_dim = read_len(&mut input)?;
    let n_subjects = read_len(&mut input)?;
    let n_rows = read_len(&mut input)?;
    let grid = TimeGrid::from_knots(read_f64s(&mut input, m + 1)?)?;
    let mut subjects = Vec::with_capacity(n_subjects);
    for _ in 0..n_subjects {
        let id_len = read_len(&mut input)?;
        let mut id = vec![0u8; id_len];
        input.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| SurvError::Format(e.to_string()))?;
        let observed = read_len(&mut input)?;
        let sensors = read_f64s(&mut input, m * tv_dim)?;
        let statics = read_f64s(&mut input, ti_dim)?;
        subjects.push(SubjectBlock {
            id,
            sensors,
            statics,
            observed,
        });
    }
    let mut subject_col = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let s = read_len(&mut input)?;
        if s >= n_subjects {
            return Err(SurvError::Format(format!("row references subject {s}")));
        }
        subject_col.push(s);
    }
    let mut interval_col = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        interval_col.push(read_len(&mut input)?);
    }
    let eval_col = read_f64s(&mut input, n_rows)?;
    let width_col = read_f64s(&mut input, n_rows)?;
    let mut event_col = vec![0u8; n_rows];
    input.read_exact(&mut event_col)?;
    let rows = (0..n_rows)
        .map(|i| ExpandedRow {
            subject: subject_col[i],
            interval: interval_col[i],
            eval_time: eval_col[i],
            width: width_col[i],
            event: event_col[i] != 0,
        })
        .collect();
    Ok(ExpandedDataset {
        grid,
        tv_dim,
        ti_dim,
        subjects,
        rows,
    })
}
