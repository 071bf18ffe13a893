//! Minimal CSV emission and parsing for the observable tables.
//!
//! All files carry a header row; floats are written with 17 significant
//! digits so values round-trip exactly. Writes go through a temporary file
//! renamed into place.

use crate::stats::{BinnedSeries, FitPoint, RankProfile, TimeSeries};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// 17 significant digits round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn write_series(path: &Path, series: &TimeSeries) -> io::Result<()> {
    let mut out = String::from("t,value\n");
    for &(t, v) in series.points() {
        let _ = writeln!(out, "{t},{}", fmt_f64(v));
    }
    write_atomic(path, &out)
}

pub fn write_binned(path: &Path, binned: &BinnedSeries) -> io::Result<()> {
    let mut out = String::from("t,mean,stderr,count\n");
    for b in &binned.bins {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(b.t_geo),
            fmt_f64(b.mean),
            fmt_f64(b.stderr),
            b.count
        );
    }
    write_atomic(path, &out)
}

pub fn write_profile(path: &Path, profile: &RankProfile) -> io::Result<()> {
    let mut out = String::from("n,mean,stderr\n");
    for (i, &(m, e)) in profile.entries().iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i + 1, fmt_f64(m), fmt_f64(e));
    }
    write_atomic(path, &out)
}

pub fn write_xy(path: &Path, header: &str, rows: &[(f64, f64, f64)]) -> io::Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for &(x, y, e) in rows {
        let _ = writeln!(out, "{},{},{}", fmt_f64(x), fmt_f64(y), fmt_f64(e));
    }
    write_atomic(path, &out)
}

/// Read fit input: header `x,y[,yerr]`, one point per line.
pub fn read_fit_points(path: &Path) -> io::Result<Vec<FitPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty file"))?;
    let cols = header.split(',').count();
    if cols < 2 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "expected at least two columns",
        ));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("line {}: expected at least 2 fields", i + 2),
            ));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 2))
            })
        };
        let x = parse(fields[0])?;
        let y = parse(fields[1])?;
        let y_err = if fields.len() > 2 {
            let v = parse(fields[2])?;
            (v > 0.0).then_some(v)
        } else {
            None
        };
        points.push(FitPoint { x, y, y_err });
    }
    Ok(points)
}
