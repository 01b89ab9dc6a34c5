#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use chemolab::mesh::{build_grid, DomainSpec, Grid};
use chemolab::oracle::parse_profile_csv;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Frozen reference profile `(x, values)`.
pub fn reference(name: &str) -> (Vec<f64>, Vec<f64>) {
    let text = std::fs::read_to_string(data_path(&format!("{name}.csv")))
        .unwrap_or_else(|e| panic!("reference {name}: {e}"));
    parse_profile_csv(&text).unwrap()
}

pub fn unit_interval(n: usize) -> Arc<Grid> {
    build_grid(&DomainSpec::unit_interval(), &[n]).unwrap()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_linf(a: &[f64], b: &[f64]) -> f64 {
    linf(a, b) / b.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Every `stride`-th entry.
pub fn subsample(v: &[f64], stride: usize) -> Vec<f64> {
    v.iter().step_by(stride).copied().collect()
}

/// Least-squares slope of log(err) against log(h).
pub fn loglog_slope(h: &[f64], err: &[f64]) -> f64 {
    let n = h.len() as f64;
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
