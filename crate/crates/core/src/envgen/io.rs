//! Dataset files.
//!
//! CSV: an optional `#` comment line, then `env_id,y,z_1,…,z_d`. Binary `y` is
//! `±1`; class labels are `0..K` and the comment line records `classes=K`.
//! Values are written in shortest round-trip form, so a CSV round trip is
//! bit-exact.
//!
//! Binary: magic `XRSK1`, then little-endian `u64` fields
//! `[classes (0 = ±1 labels), d, datasets]`, and per dataset
//! `[env_id, n]` followed by `n` rows of `f64` `(y, x_1..x_d)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, EnvError, Labels};
use crate::autodiff::Array;

pub const CSV_VERSION: &str = "# transfer-risk dataset v1";
const MAGIC: &[u8; 5] = b"XRSK1";

fn classes_of(sets: &[Dataset]) -> usize {
    match sets.first().map(|d| &d.labels) {
        Some(Labels::Classes { classes, .. }) => *classes,
        _ => 0,
    }
}

pub fn write_csv(path: &Path, sets: &[Dataset]) -> Result<(), EnvError> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = sets.first().map_or(0, Dataset::dim);
    let classes = classes_of(sets);
    if classes > 0 {
        writeln!(w, "{CSV_VERSION} classes={classes}")?;
    } else {
        writeln!(w, "{CSV_VERSION} labels=binary")?;
    }
    write!(w, "env_id,y")?;
    for j in 1..=d {
        write!(w, ",z_{j}")?;
    }
    writeln!(w)?;
    for set in sets {
        for i in 0..set.len() {
            write!(w, "{},{}", set.env_id, set.labels.as_int(i))?;
            for v in set.features.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]; rows are grouped by `env_id` in order
/// of first appearance.
pub fn read_csv(path: &Path) -> Result<Vec<Dataset>, EnvError> {
    let name = path.display().to_string();
    let err = |line: usize, msg: String| EnvError::Parse { path: name.clone(), line, msg };
    let reader = BufReader::new(File::open(path)?);
    let mut classes = 0usize;
    let mut d = None;
    let mut groups: Vec<(usize, Vec<i64>, Vec<f64>)> = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(c) = comment.split_whitespace().find_map(|t| t.strip_prefix("classes=")) {
                classes = c.parse().map_err(|_| err(lineno, format!("bad class count `{c}`")))?;
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if d.is_none() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 || cols[0] != "env_id" || cols[1] != "y" {
                return Err(err(lineno, "expected header `env_id,y,z_1,...`".into()));
            }
            d = Some(cols.len() - 2);
            continue;
        }
        let dim = d.unwrap_or(0);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(err(lineno, format!("expected {} fields, found {}", dim + 2, fields.len())));
        }
        let env: usize = fields[0].parse().map_err(|_| err(lineno, format!("bad env_id `{}`", fields[0])))?;
        let y: i64 = fields[1].parse().map_err(|_| err(lineno, format!("bad label `{}`", fields[1])))?;
        let valid = if classes > 0 { (0..classes as i64).contains(&y) } else { y == 1 || y == -1 };
        if !valid {
            return Err(err(lineno, format!("label {y} out of range")));
        }
        let pos = match groups.iter().position(|g| g.0 == env) {
            Some(p) => p,
            None => {
                groups.push((env, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[pos].1.push(y);
        for f in &fields[2..] {
            let v: f64 = f.parse().map_err(|_| err(lineno, format!("bad value `{f}`")))?;
            if !v.is_finite() {
                return Err(err(lineno, "non-finite feature".into()));
            }
            groups[pos].2.push(v);
        }
    }
    let dim = d.ok_or_else(|| err(0, "missing header".into()))?;
    Ok(groups.into_iter().map(|(env_id, y, x)| build(env_id, y, x, dim, classes)).collect())
}

fn build(env_id: usize, y: Vec<i64>, x: Vec<f64>, d: usize, classes: usize) -> Dataset {
    let n = y.len();
    let labels = if classes > 0 {
        Labels::Classes { y: y.into_iter().map(|v| v as usize).collect(), classes }
    } else {
        Labels::Binary(y.into_iter().map(|v| v as f64).collect())
    };
    Dataset { env_id, features: Array::matrix(n, d, x).expect("validated shape"), labels }
}

pub fn write_binary(path: &Path, sets: &[Dataset]) -> Result<(), EnvError> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = sets.first().map_or(0, Dataset::dim);
    w.write_all(MAGIC)?;
    for v in [classes_of(sets), d, sets.len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for set in sets {
        w.write_all(&(set.env_id as u64).to_le_bytes())?;
        w.write_all(&(set.len() as u64).to_le_bytes())?;
        for i in 0..set.len() {
            w.write_all(&(set.labels.as_int(i) as f64).to_le_bytes())?;
            for v in set.features.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Vec<Dataset>, EnvError> {
    let name = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EnvError::BadMagic(name));
    }
    let mut u = || -> Result<u64, EnvError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let classes = u()? as usize;
    let d = u()? as usize;
    let count = u()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let env_id = u()? as usize;
        let n = u()? as usize;
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            y.push(f64::from_bits(u()?) as i64);
            for _ in 0..d {
                let v = f64::from_bits(u()?);
                if !v.is_finite() {
                    return Err(EnvError::Parse { path: name.clone(), line: 0, msg: "non-finite feature".into() });
                }
                x.push(v);
            }
        }
        out.push(build(env_id, y, x, d, classes));
    }
    Ok(out)
}
