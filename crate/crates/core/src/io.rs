//! CSV point tables and JSON sidecars.
//!
//! A point table has columns `x1..xd`, optionally followed by `energy` and
//! `label`.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Array2<f64>,
    pub energies: Option<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl PointSet {
    pub fn new(points: Array2<f64>) -> Self {
        PointSet {
            points,
            energies: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

pub fn write_point_set(path: &Path, set: &PointSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (1..=set.dim()).map(|j| format!("x{j}")).collect();
    if set.energies.is_some() {
        header.push("energy".into());
    }
    if set.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (i, row) in set.points.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(e) = &set.energies {
            rec.push(format!("{:?}", e[i]));
        }
        if let Some(l) = &set.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_point_set(path: &Path) -> Result<PointSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers()?.clone();
    let dim = header.iter().take_while(|h| h.starts_with('x')).count();
    let mut energy_col = None;
    let mut label_col = None;
    for (j, h) in header.iter().enumerate().skip(dim) {
        match h {
            "energy" => energy_col = Some(j),
            "label" => label_col = Some(j),
            other => return Err(Error::Format(format!("unexpected column {other:?} in {}", path.display()))),
        }
    }
    if dim == 0 {
        return Err(Error::Format(format!("{} has no coordinate columns", path.display())));
    }
    let mut values = Vec::new();
    let mut energies = energy_col.map(|_| Vec::new());
    let mut labels = label_col.map(|_| Vec::new());
    for rec in r.records() {
        let rec = rec?;
        for j in 0..dim {
            values.push(parse_f64(&rec[j])?);
        }
        if let (Some(j), Some(e)) = (energy_col, energies.as_mut()) {
            e.push(parse_f64(&rec[j])?);
        }
        if let (Some(j), Some(l)) = (label_col, labels.as_mut()) {
            l.push(rec[j].trim().parse().map_err(|_| Error::Format(format!("bad label {:?}", &rec[j])))?);
        }
    }
    let n = values.len() / dim;
    let points = Array2::from_shape_vec((n, dim), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(PointSet {
        points,
        energies,
        labels,
    })
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Format(format!("bad number {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("non-finite value {s:?}")));
    }
    Ok(v)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `<path>.meta.json` next to a data file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}
