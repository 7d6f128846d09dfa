//! Versioned text checkpoints.
//!
//! Format: header line `EBGFN-CKPT 1`, then one record per tensor:
//! `name ndim dims... values...` with whitespace-separated fields. Values are
//! written with the shortest decimal representation that parses back to the
//! same 64-bit float, so a write/read cycle is exact.

use crate::nn::ParamStore;
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

const HEADER: &str = "EBGFN-CKPT 1";

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadHeader(String),
    BadRecord { line: usize, reason: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::BadHeader(h) => write!(f, "bad checkpoint header {h:?}"),
            CheckpointError::BadRecord { line, reason } => {
                write!(f, "bad checkpoint record at line {line}: {reason}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Write named tensor sections; each section's tensors are stored under
/// `prefix.name`.
pub fn write_checkpoint(
    path: &Path,
    sections: &[(&str, &ParamStore)],
) -> Result<(), CheckpointError> {
    let mut buf = String::new();
    buf.push_str(HEADER);
    buf.push('\n');
    for (prefix, store) in sections {
        for (name, tensor) in store.iter() {
            buf.push_str(prefix);
            buf.push('.');
            buf.push_str(name);
            buf.push(' ');
            buf.push_str(&tensor.ndim().to_string());
            for d in tensor.shape() {
                buf.push(' ');
                buf.push_str(&d.to_string());
            }
            for v in tensor.iter() {
                buf.push(' ');
                buf.push_str(&format_f64(*v));
            }
            buf.push('\n');
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(buf.as_bytes())?;
    Ok(())
}

/// Read all records as a flat `full-name -> tensor` map.
pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>, CheckpointError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        Some((_, h)) => return Err(CheckpointError::BadHeader(h.to_string())),
        None => return Err(CheckpointError::BadHeader(String::new())),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(line).map_err(|reason| CheckpointError::BadRecord {
            line: i + 1,
            reason,
        })?;
        out.insert(record.0, record.1);
    }
    Ok(out)
}

fn parse_record(line: &str) -> Result<(String, ArrayD<f64>), String> {
    let mut fields = line.split_whitespace();
    let name = fields.next().ok_or("missing name")?.to_string();
    let ndim: usize = fields
        .next()
        .ok_or("missing ndim")?
        .parse()
        .map_err(|e| format!("ndim: {e}"))?;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d: usize = fields
            .next()
            .ok_or("missing dim")?
            .parse()
            .map_err(|e| format!("dim: {e}"))?;
        dims.push(d);
    }
    let expected: usize = dims.iter().product();
    let mut values = Vec::with_capacity(expected);
    for f in fields {
        let v: f64 = f.parse().map_err(|e| format!("value {f:?}: {e}"))?;
        values.push(v);
    }
    if values.len() != expected {
        return Err(format!("expected {expected} values, got {}", values.len()));
    }
    let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), values)
        .map_err(|e| format!("shape: {e}"))?;
    Ok((name, tensor))
}

/// Extract the tensors under `prefix.` into a fresh store.
pub fn section(map: &BTreeMap<String, ArrayD<f64>>, prefix: &str) -> ParamStore {
    let mut store = ParamStore::new();
    let pat = format!("{prefix}.");
    for (name, tensor) in map {
        if let Some(rest) = name.strip_prefix(&pat) {
            store.insert(rest, tensor.clone());
        }
    }
    store
}

fn format_f64(v: f64) -> String {
    // `{}` prints the shortest string that round-trips for finite values.
    if v == v.trunc() && v.is_finite() && v.abs() < 1e15 {
        // Keep an explicit ".0" so integers stay visually floats; parsing is
        // unaffected.
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}
