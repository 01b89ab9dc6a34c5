//! Command-line front end: configuration, subcommands, CSV and JSON output.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{self, Check, ConvergenceOptions};
use crate::error::{Error, Result};
use crate::evolve::{self, SimulationConfig, TrajectoryRecord};
use crate::mesh::{self, DomainSpec, Grid, ScalarField};
use crate::oracle;
use crate::steady::{self, GSpec, ModelParams, SteadyStatePair};

/// Text of the shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.conf");

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Initial density.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum U0Spec {
    Constant {
        value: f64,
    },
    /// `baseline + amplitude · exp(−|x − center|² / (2 width²))`
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
        baseline: f64,
    },
    /// `baseline + amplitude · ξ` with ξ uniform on [−1, 1] per node.
    PerturbedConstant {
        baseline: f64,
        amplitude: f64,
        seed: u64,
    },
    /// `baseline + amplitude · cos(mode · π (x − x₀)/L)` along the first axis.
    Cosine {
        baseline: f64,
        amplitude: f64,
        mode: f64,
    },
}

impl U0Spec {
    pub fn field(&self, grid: &Arc<Grid>) -> Result<ScalarField> {
        let f = match self {
            U0Spec::Constant { value } => ScalarField::constant(grid, *value),
            U0Spec::GaussianBump {
                center,
                width,
                amplitude,
                baseline,
            } => {
                if center.len() != grid.dim() {
                    return Err(Error::config(
                        "u0_spec",
                        format!("gaussian-bump center needs {} coordinates", grid.dim()),
                    ));
                }
                ScalarField::from_fn(grid, |x| {
                    let d2: f64 = center.iter().enumerate().map(|(k, c)| (x[k] - c).powi(2)).sum();
                    baseline + amplitude * (-d2 / (2.0 * width * width)).exp()
                })
            }
            U0Spec::PerturbedConstant {
                baseline,
                amplitude,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let vals = (0..grid.len())
                    .map(|_| baseline + amplitude * rng.gen_range(-1.0..=1.0))
                    .collect();
                ScalarField::new(grid, vals)?
            }
            U0Spec::Cosine {
                baseline,
                amplitude,
                mode,
            } => {
                let (lo, hi) = (grid.lower()[0], grid.upper()[0]);
                ScalarField::from_fn(grid, |x| {
                    baseline + amplitude * (mode * std::f64::consts::PI * (x[0] - lo) / (hi - lo)).cos()
                })
            }
        };
        if !(f.min() > 0.0) {
            return Err(Error::config("u0_spec", "initial density must be positive at every node"));
        }
        Ok(f)
    }

    fn parse(text: &str) -> Result<Self> {
        let (kind, nums) = split_kind(text, "u0_spec")?;
        let need = |n: usize| -> Result<()> {
            if nums.len() != n {
                return Err(Error::config("u0_spec", format!("`{kind}` takes {n} numbers, got {}", nums.len())));
            }
            Ok(())
        };
        match kind {
            "constant" => {
                need(1)?;
                Ok(U0Spec::Constant { value: nums[0] })
            }
            "gaussian-bump" => {
                if nums.len() != 4 && nums.len() != 5 {
                    return Err(Error::config(
                        "u0_spec",
                        "gaussian-bump takes center (1 or 2 numbers), width, amplitude, baseline",
                    ));
                }
                let k = nums.len() - 3;
                Ok(U0Spec::GaussianBump {
                    center: nums[..k].to_vec(),
                    width: nums[k],
                    amplitude: nums[k + 1],
                    baseline: nums[k + 2],
                })
            }
            "perturbed-constant" => {
                need(3)?;
                if nums[2] < 0.0 || nums[2].fract() != 0.0 {
                    return Err(Error::config("u0_spec", "perturbed-constant seed must be a nonnegative integer"));
                }
                Ok(U0Spec::PerturbedConstant {
                    baseline: nums[0],
                    amplitude: nums[1],
                    seed: nums[2] as u64,
                })
            }
            "cosine" => {
                need(3)?;
                Ok(U0Spec::Cosine {
                    baseline: nums[0],
                    amplitude: nums[1],
                    mode: nums[2],
                })
            }
            other => Err(Error::config("u0_spec", format!("unknown kind `{other}`"))),
        }
    }

    fn echo(&self) -> String {
        match self {
            U0Spec::Constant { value } => format!("constant {value}"),
            U0Spec::GaussianBump {
                center,
                width,
                amplitude,
                baseline,
            } => {
                let c: Vec<String> = center.iter().map(|c| c.to_string()).collect();
                format!("gaussian-bump {}, {width}, {amplitude}, {baseline}", c.join(", "))
            }
            U0Spec::PerturbedConstant {
                baseline,
                amplitude,
                seed,
            } => format!("perturbed-constant {baseline}, {amplitude}, {seed}"),
            U0Spec::Cosine {
                baseline,
                amplitude,
                mode,
            } => format!("cosine {baseline}, {amplitude}, {mode}"),
        }
    }
}

fn split_kind<'a>(text: &'a str, field: &str) -> Result<(&'a str, Vec<f64>)> {
    let text = text.trim();
    let (kind, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    Ok((kind, parse_list(rest, field)?))
}

fn parse_f64(s: &str, field: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::config(field, format!("expected a number, got `{}`", s.trim())))?;
    if !v.is_finite() {
        return Err(Error::config(field, "must be finite"));
    }
    Ok(v)
}

fn parse_usize(s: &str, field: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(field, format!("expected a nonnegative integer, got `{}`", s.trim())))
}

fn parse_list(s: &str, field: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| parse_f64(t, field)).collect()
}

fn parse_bool(s: &str, field: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(field, format!("expected true or false, got `{other}`"))),
    }
}

fn parse_g_spec(s: &str) -> Result<GSpec> {
    let (kind, n) = split_kind(s, "g_spec")?;
    let bad = |k: usize| Error::config("g_spec", format!("`{kind}` takes {k} numbers, got {}", n.len()));
    match kind {
        "constant" if n.len() == 1 => Ok(GSpec::Constant { value: n[0] }),
        "constant" => Err(bad(1)),
        "affine" if n.len() == 2 => Ok(GSpec::Affine { base: n[0], slope: n[1] }),
        "affine" => Err(bad(2)),
        "cosine-bump" if n.len() == 4 => Ok(GSpec::CosineBump {
            base: n[0],
            amplitude: n[1],
            center: n[2],
            width: n[3],
        }),
        "cosine-bump" => Err(bad(4)),
        other => Err(Error::config("g_spec", format!("unknown kind `{other}`"))),
    }
}

fn echo_g_spec(g: &GSpec) -> String {
    match g {
        GSpec::Constant { value } => format!("constant {value}"),
        GSpec::Affine { base, slope } => format!("affine {base}, {slope}"),
        GSpec::CosineBump {
            base,
            amplitude,
            center,
            width,
        } => format!("cosine-bump {base}, {amplitude}, {center}, {width}"),
    }
}

fn parse_domain(s: &str) -> Result<DomainSpec> {
    let (kind, n) = split_kind(s, "domain_spec")?;
    match (kind, n.len()) {
        ("interval", 2) => Ok(DomainSpec::Interval {
            lower: n[0],
            upper: n[1],
        }),
        ("rectangle", 4) => Ok(DomainSpec::Rectangle {
            lower: [n[0], n[1]],
            upper: [n[2], n[3]],
        }),
        ("interval", _) => Err(Error::config("domain_spec", "interval takes lower, upper")),
        ("rectangle", _) => Err(Error::config(
            "domain_spec",
            "rectangle takes lower_x, lower_y, upper_x, upper_y",
        )),
        (other, _) => Err(Error::config("domain_spec", format!("unknown kind `{other}`"))),
    }
}

fn echo_domain(d: &DomainSpec) -> String {
    match d {
        DomainSpec::Interval { lower, upper } => format!("interval {lower}, {upper}"),
        DomainSpec::Rectangle { lower, upper } => {
            format!("rectangle {}, {}, {}, {}", lower[0], lower[1], upper[0], upper[1])
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

const KEYS: &[&str] = &[
    "lambda",
    "mu",
    "gamma",
    "g_spec",
    "domain_spec",
    "resolution",
    "newton_tol_residual",
    "newton_tol_step",
    "newton_max_iter",
    "newton_damping_min",
    "fp_tol",
    "fp_max_iter",
    "relaxation",
    "u0_spec",
    "t_end",
    "dt",
    "sample_every",
    "snapshot_times",
    "monitor_alpha",
    "fit_tol",
    "seed",
    "n_inits",
    "gamma_grid",
    "oracle_compare",
    "output_dir",
];

/// Everything a run needs; parsed from one flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub resolution: Vec<usize>,
    pub u0_spec: U0Spec,
    pub t_end: f64,
    pub dt: f64,
    pub sample_every: f64,
    pub snapshot_times: Vec<f64>,
    pub monitor_alpha: f64,
    /// Relative slack of the pointwise L² decay check.
    pub fit_tol: f64,
    pub seed: u64,
    pub n_inits: usize,
    pub gamma_grid: Vec<f64>,
    pub oracle_compare: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse(DEFAULT_CONFIG).expect("shipped default configuration parses")
    }
}

impl RunConfig {
    /// Parses a complete configuration; keys missing from `text` keep the
    /// built-in defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = if std::ptr::eq(text, DEFAULT_CONFIG) {
            RunConfig::bare()
        } else {
            RunConfig::default()
        };
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn bare() -> Self {
        RunConfig {
            params: ModelParams::default(),
            resolution: vec![201],
            u0_spec: U0Spec::Constant { value: 1.0 },
            t_end: 1.0,
            dt: 1e-3,
            sample_every: 0.05,
            snapshot_times: Vec::new(),
            monitor_alpha: evolve::DEFAULT_MONITOR_ALPHA,
            fit_tol: 0.05,
            seed: 0,
            n_inits: 10,
            gamma_grid: Vec::new(),
            oracle_compare: false,
            output_dir: PathBuf::from("chemolab_out"),
        }
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "key given more than once"));
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.params;
        match key {
            "lambda" => p.lambda = parse_f64(v, key)?,
            "mu" => p.mu = parse_f64(v, key)?,
            "gamma" => p.gamma = parse_f64(v, key)?,
            "g_spec" => p.g_spec = parse_g_spec(v)?,
            "domain_spec" => p.domain_spec = parse_domain(v)?,
            "resolution" => {
                self.resolution = v.split(',').map(|t| parse_usize(t, key)).collect::<Result<_>>()?;
            }
            "newton_tol_residual" => p.newton_cfg.tol_residual = parse_f64(v, key)?,
            "newton_tol_step" => p.newton_cfg.tol_step = parse_f64(v, key)?,
            "newton_max_iter" => p.newton_cfg.max_iter = parse_usize(v, key)?,
            "newton_damping_min" => p.newton_cfg.damping_min = parse_f64(v, key)?,
            "fp_tol" => p.fp_tol = parse_f64(v, key)?,
            "fp_max_iter" => p.fp_max_iter = parse_usize(v, key)?,
            "relaxation" => p.relaxation = parse_f64(v, key)?,
            "u0_spec" => self.u0_spec = U0Spec::parse(v)?,
            "t_end" => self.t_end = parse_f64(v, key)?,
            "dt" => self.dt = parse_f64(v, key)?,
            "sample_every" => self.sample_every = parse_f64(v, key)?,
            "snapshot_times" => self.snapshot_times = parse_list(v, key)?,
            "monitor_alpha" => self.monitor_alpha = parse_f64(v, key)?,
            "fit_tol" => self.fit_tol = parse_f64(v, key)?,
            "seed" => self.seed = v.parse().map_err(|_| Error::config(key, "expected a nonnegative integer"))?,
            "n_inits" => self.n_inits = parse_usize(v, key)?,
            "gamma_grid" => self.gamma_grid = parse_list(v, key)?,
            "oracle_compare" => self.oracle_compare = parse_bool(v, key)?,
            "output_dir" => {
                if v.is_empty() {
                    return Err(Error::config(key, "must not be empty"));
                }
                self.output_dir = PathBuf::from(v);
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.params.newton_cfg.validate()?;
        if self.resolution.len() != self.params.domain_spec.dim() {
            return Err(Error::config(
                "resolution",
                format!("domain needs {} entries", self.params.domain_spec.dim()),
            ));
        }
        for (name, v) in [
            ("t_end", self.t_end),
            ("dt", self.dt),
            ("sample_every", self.sample_every),
            ("monitor_alpha", self.monitor_alpha),
            ("fit_tol", self.fit_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.n_inits == 0 {
            return Err(Error::config("n_inits", "must be at least 1"));
        }
        if self.gamma_grid.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::config("gamma_grid", "entries must be positive"));
        }
        Ok(())
    }

    /// Every key with its effective value, in canonical order.
    pub fn echo(&self) -> String {
        let p = &self.params;
        let n = &p.newton_cfg;
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "lambda" => p.lambda.to_string(),
                "mu" => p.mu.to_string(),
                "gamma" => p.gamma.to_string(),
                "g_spec" => echo_g_spec(&p.g_spec),
                "domain_spec" => echo_domain(&p.domain_spec),
                "resolution" => join(&self.resolution),
                "newton_tol_residual" => n.tol_residual.to_string(),
                "newton_tol_step" => n.tol_step.to_string(),
                "newton_max_iter" => n.max_iter.to_string(),
                "newton_damping_min" => n.damping_min.to_string(),
                "fp_tol" => p.fp_tol.to_string(),
                "fp_max_iter" => p.fp_max_iter.to_string(),
                "relaxation" => p.relaxation.to_string(),
                "u0_spec" => self.u0_spec.echo(),
                "t_end" => self.t_end.to_string(),
                "dt" => self.dt.to_string(),
                "sample_every" => self.sample_every.to_string(),
                "snapshot_times" => join(&self.snapshot_times),
                "monitor_alpha" => self.monitor_alpha.to_string(),
                "fit_tol" => self.fit_tol.to_string(),
                "seed" => self.seed.to_string(),
                "n_inits" => self.n_inits.to_string(),
                "gamma_grid" => join(&self.gamma_grid),
                "oracle_compare" => self.oracle_compare.to_string(),
                "output_dir" => self.output_dir.display().to_string(),
                _ => unreachable!(),
            };
            s.push_str(&format!("{key} = {v}\n"));
        }
        s
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        mesh::build_grid(&self.params.domain_spec, &self.resolution)
    }

    fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            t_end: self.t_end,
            dt: self.dt,
            sample_every: self.sample_every,
            snapshot_times: self.snapshot_times.clone(),
            monitor_alpha: self.monitor_alpha,
            enforce_monitors: true,
        }
    }
}

/// Field CSV: header `x[,y],value`, one row per node in node-index order.
pub fn field_csv(field: &ScalarField) -> String {
    let grid = field.grid();
    let mut s = String::from(if grid.dim() == 1 { "x,value\n" } else { "x,y,value\n" });
    for (i, v) in field.values().iter().enumerate() {
        let c = grid.coord(i);
        if grid.dim() == 1 {
            s.push_str(&format!("{:.16e},{v:.16e}\n", c[0]));
        } else {
            s.push_str(&format!("{:.16e},{:.16e},{v:.16e}\n", c[0], c[1]));
        }
    }
    s
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Assembled report document.
#[derive(Debug, Serialize)]
pub struct Report {
    pub subcommand: String,
    pub config: String,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub details: Value,
}

impl Report {
    fn new(subcommand: &str, cfg: &RunConfig, checks: Vec<Check>, details: Value) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        // The output directory is left out so reports compare byte-for-byte
        // across destinations.
        let config: String = cfg
            .echo()
            .lines()
            .filter(|l| !l.starts_with("output_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        Report {
            subcommand: subcommand.into(),
            config,
            checks,
            pass,
            details,
        }
    }
}

fn lt(name: &str, lhs: f64, rhs: f64) -> Check {
    let mut c = Check::le(name, lhs, rhs);
    c.pass = lhs < rhs;
    c
}

fn with_slack(mut c: Check, slack: f64) -> Check {
    c.pass = c.margin >= -slack;
    c
}

/// Bound checks for a steady pair with the given nodal slack.
pub fn steady_checks(pair: &SteadyStatePair, params: &ModelParams, slack: f64) -> Vec<Check> {
    let b = pair.bounds(params);
    let scale = pair.w.max();
    vec![
        Check::le(
            "fixed point: final update <= fp_tol |W|_inf",
            pair.final_update,
            params.fp_tol * scale,
        ),
        with_slack(
            Check::le("max over nodes of (lambda/mu) e^(V-gamma) - U <= 0", b.lower_u, 0.0),
            slack,
        ),
        with_slack(Check::le("max over nodes of U - (lambda/mu) e^V <= 0", b.upper_u, 0.0), slack),
        lt("-min V < 0", b.lower_v, 0.0),
        lt("max V - gamma < 0", b.upper_v, 0.0),
    ]
}

/// Relative L∞ distance of the 1D steady pair to the coupled shooting oracle.
fn oracle_checks(pair: &SteadyStatePair, params: &ModelParams) -> Result<Vec<Check>> {
    let grid = pair.u.grid();
    if grid.dim() != 1 {
        return Ok(Vec::new());
    }
    let xs = grid.axis(0).to_vec();
    let prof = oracle::shoot_coupled_steady_1d(params, &xs, 1e-12)?;
    let rel = |a: &[f64], b: &[f64]| {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    };
    Ok(vec![
        Check::le("oracle: relative L-inf error of U", rel(pair.u.values(), &prof.u), 1e-4),
        Check::le("oracle: relative L-inf error of V", rel(pair.v.values(), &prof.v), 1e-4),
    ])
}

/// Monitor checks over a trajectory.
pub fn trajectory_checks(traj: &TrajectoryRecord, params: &ModelParams, u0: &ScalarField, alpha: f64) -> Result<Vec<Check>> {
    let gamma = params.gamma;
    let slack = 1e-12 * gamma.max(1.0);
    let bound = mesh::lp_norm(u0, 1.0)?.max(traj.grid.measure() * params.ratio());
    let h2 = traj.grid.h_max().powi(2);
    let s = &traj.samples;
    let min_u = s.iter().map(|x| x.min_u).fold(f64::INFINITY, f64::min);
    let min_v = s.iter().map(|x| x.min_v).fold(f64::INFINITY, f64::min);
    let max_v = s.iter().map(|x| x.max_v).fold(f64::NEG_INFINITY, f64::max);
    let max_l1 = s.iter().map(|x| x.l1_u).fold(f64::NEG_INFINITY, f64::max);
    // Worst sub-solution margin.
    let sub = s
        .iter()
        .map(|x| (x.y_sub - alpha * (h2 + x.dt), x.min_u))
        .min_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0)))
        .unwrap_or((0.0, 0.0));
    Ok(vec![
        lt("0 < min u over samples", 0.0, min_u),
        with_slack(lt("0 < min v over samples", 0.0, min_v), slack),
        with_slack(lt("max v < gamma over samples", max_v, gamma), slack),
        Check::le(
            "max |u|_1 <= max(|u0|_1, |Omega| lambda/mu)(1 + 1e-6)",
            max_l1,
            bound * (1.0 + 1e-6),
        ),
        Check::le("sub-solution: y(t) - alpha(h^2 + dt) <= min u (worst sample)", sub.0, sub.1),
    ])
}

fn cmd_steady(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let grid = cfg.grid()?;
    let pair = steady::fixed_point_steady(&cfg.params, &grid, None)?;
    let mut checks = steady_checks(&pair, &cfg.params, 1e-6);
    if cfg.oracle_compare {
        checks.extend(oracle_checks(&pair, &cfg.params)?);
    }
    write(dir, "steady_u.csv", &field_csv(&pair.u))?;
    write(dir, "steady_v.csv", &field_csv(&pair.v))?;
    write(dir, "steady_w.csv", &field_csv(&pair.w))?;
    let details = json!({
        "iterations": pair.iterations,
        "final_update": pair.final_update,
        "update_history": pair.update_history,
        "residuals": pair.residual_report,
        "bounds": pair.bounds(&cfg.params),
    });
    let report = Report::new("steady", cfg, checks, details);
    write(dir, "steady_report.json", &to_json(&report))?;
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn write_trajectory(dir: &Path, name: &str, traj: &TrajectoryRecord) -> Result<()> {
    write(dir, name, &traj.to_csv())?;
    for snap in &traj.snapshots {
        write(dir, &format!("snapshot_u_t{:.6}.csv", snap.t), &field_csv(&snap.u))?;
        write(dir, &format!("snapshot_v_t{:.6}.csv", snap.t), &field_csv(&snap.v))?;
    }
    Ok(())
}

fn cmd_evolve(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let grid = cfg.grid()?;
    let u0 = cfg.u0_spec.field(&grid)?;
    let pair = steady::fixed_point_steady(&cfg.params, &grid, None)?;
    let traj = match evolve::simulate(&u0, &cfg.params, &cfg.simulation(), Some(&pair)) {
        Ok(t) => t,
        Err(Error::Verification {
            t,
            message,
            scheme_suspect,
            trajectory,
        }) => {
            write_trajectory(dir, "trajectory.csv", &trajectory)?;
            return Err(Error::Verification {
                t,
                message,
                scheme_suspect,
                trajectory,
            });
        }
        Err(e) => return Err(e),
    };
    write_trajectory(dir, "trajectory.csv", &traj)?;
    let checks = trajectory_checks(&traj, &cfg.params, &u0, cfg.monitor_alpha)?;
    let details = json!({
        "samples": traj.samples.len(),
        "steps_accepted": traj.steps_accepted,
        "steps_rejected": traj.steps_rejected,
        "sup_linf_u": traj.sup_linf_u,
    });
    let report = Report::new("evolve", cfg, checks, details);
    write(dir, "evolve_report.json", &to_json(&report))?;
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

/// The full verification pipeline; returns the report without writing it.
pub fn verify_pipeline(cfg: &RunConfig) -> Result<(Report, TrajectoryRecord)> {
    let params = &cfg.params;
    let grid = cfg.grid()?;
    let pair = steady::fixed_point_steady(params, &grid, None)?;
    let mut checks = steady_checks(&pair, params, 1e-6);
    if cfg.oracle_compare {
        checks.extend(oracle_checks(&pair, params)?);
    }
    let u0 = cfg.u0_spec.field(&grid)?;
    let constants = analysis::constants_report(params, &u0, Some(&pair))?;
    checks.extend(constants.checks());

    let mut sim = cfg.simulation();
    sim.enforce_monitors = false;
    let traj = evolve::simulate(&u0, params, &sim, Some(&pair))?;
    checks.extend(trajectory_checks(&traj, params, &u0, cfg.monitor_alpha)?);
    checks.push(Check::le(
        "uniform bound: sup_t |u|_inf <= c5*",
        traj.sup_linf_u,
        constants.moser.c5s,
    ));

    let floor = analysis::discretization_floor(&traj, cfg.dt, params);
    let l2: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .map(|s| (s.t, s.l2_diff_u.unwrap_or(0.0)))
        .collect();
    let floor_factor = if l2[0].1 > 0.0 { floor / l2[0].1 } else { 1.0 };
    let opts = ConvergenceOptions {
        tol: cfg.fit_tol,
        floor,
        window: analysis::default_fit_window(&l2, floor_factor),
    };
    let conv = match analysis::check_convergence_theorem(&traj, &pair, params, &constants, &opts) {
        Ok(r) => {
            checks.extend(r.checks.iter().cloned());
            if let Some(f) = r.fit_l2_u {
                checks.push(Check::ge("fit quality: r^2 of |u-U|_2 decay >= 0.98", f.r_squared, 0.98));
            }
            serde_json::to_value(&r).expect("report serializes")
        }
        Err(Error::Precondition(msg)) => {
            checks.push(Check::le(
                "precondition: gamma < gamma_star_prime",
                params.gamma,
                constants.gamma_star_prime,
            ));
            json!({ "refused": msg })
        }
        Err(e) => return Err(e),
    };
    let details = json!({
        "steady_iterations": pair.iterations,
        "constants": constants,
        "convergence": conv,
        "steps_accepted": traj.steps_accepted,
        "steps_rejected": traj.steps_rejected,
        "sup_linf_u": traj.sup_linf_u,
    });
    Ok((Report::new("verify", cfg, checks, details), traj))
}

fn cmd_verify(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let (report, traj) = verify_pipeline(cfg)?;
    write_trajectory(dir, "trajectory.csv", &traj)?;
    write(dir, "verify_report.json", &to_json(&report))?;
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn cmd_constants(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    let grid = cfg.grid()?;
    let u0 = cfg.u0_spec.field(&grid)?;
    let c = analysis::constants_report(&cfg.params, &u0, None)?;
    let details = json!({
        "constants": c,
        "in_uniqueness_regime": c.in_uniqueness_regime(),
        "in_convergence_regime": c.in_convergence_regime(),
    });
    // The document flags failed thresholds; computing them is the success.
    let report = Report::new("constants", cfg, c.checks(), details);
    write(dir, "constants.json", &to_json(&report))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    gamma: f64,
    f1: f64,
    f2: f64,
    below_gamma_star: bool,
    report: steady::UniquenessReport,
}

fn cmd_sweep_gamma(cfg: &RunConfig, dir: &Path) -> Result<i32> {
    if cfg.gamma_grid.is_empty() {
        return Err(Error::config("gamma_grid", "sweep-gamma needs at least one value"));
    }
    let grid = cfg.grid()?;
    let entries: Vec<Result<SweepEntry>> = cfg
        .gamma_grid
        .par_iter()
        .map(|&gamma| {
            let params = ModelParams {
                gamma,
                ..cfg.params.clone()
            };
            let report = steady::uniqueness_sweep(&params, &grid, cfg.n_inits, cfg.seed)?;
            let thr = steady::compute_gamma_star(params.lambda, params.mu, params.g_sup(&grid), report.trace_constant)?;
            Ok(SweepEntry {
                gamma,
                f1: thr.f1(gamma),
                f2: thr.f2(gamma),
                below_gamma_star: gamma < thr.gamma_star,
                report,
            })
        })
        .collect();
    let entries: Vec<SweepEntry> = entries.into_iter().collect::<Result<_>>()?;
    let mut checks = Vec::new();
    for e in entries.iter().filter(|e| e.below_gamma_star) {
        let failed = e.report.outcomes.iter().filter(|o| o.error.is_some()).count();
        checks.push(Check::le(
            format!("gamma = {}: failed initializations", e.gamma),
            failed as f64,
            0.0,
        ));
        checks.push(Check::le(
            format!("gamma = {}: max pairwise |U_i - U_j|_inf <= 1e-6", e.gamma),
            e.report.max_pairwise,
            1e-6,
        ));
    }
    let report = Report::new("sweep-gamma", cfg, checks, serde_json::to_value(&entries).expect("serializes"));
    write(dir, "sweep_gamma.json", &to_json(&report))?;
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn cmd_oracle(dir: &Path) -> Result<i32> {
    let mut names = Vec::new();
    for (name, x, v) in oracle::reference_profiles()? {
        write(dir, &format!("{name}.csv"), &oracle::profile_csv(&x, &v))?;
        names.push(name);
    }
    write(dir, "oracle_manifest.json", &to_json(&json!({
        "profiles": names,
        "shooting_tolerance": 1e-12,
        "signal": "W = 1, gamma = 1, g = 1, lambda = mu = 1 on [0,1], 801 nodes",
        "density": "V = 0.3 + 0.1 cos(pi x), lambda = mu = 1 on [0,1], 801 nodes",
        "coupled": "lambda = mu = 1, g = 1, gamma = 0.5 on [0,1], 401 nodes",
    })))?;
    Ok(EXIT_OK)
}

#[derive(Parser, Debug)]
#[command(name = "chemolab", version, about = "Steady states, evolution and verification runs for a chemotaxis-consumption model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Steady state by fixed-point iteration, with bound report.
    Steady(Common),
    /// Time evolution from the configured initial density.
    Evolve(Common),
    /// Steady state, evolution and all checks in one pass/fail report.
    Verify(Common),
    /// Embedding constants, thresholds and the uniform-bound chain.
    Constants(Common),
    /// Uniqueness sweeps over the configured gamma grid.
    SweepGamma(Common),
    /// Regenerate the shooting-method reference profiles.
    Oracle(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (flat `key = value`); built-in defaults otherwise.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Precondition(_) => EXIT_USAGE,
        Error::Verification { .. } => EXIT_VERIFICATION,
        _ => EXIT_NUMERICAL,
    }
}

/// Machine-readable error document.
pub fn error_document(e: &Error) -> Value {
    let mut doc = json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": exit_code(e),
    });
    let extra = match e {
        Error::Config { field, .. } => json!({ "field": field }),
        Error::NonConvergence { method, iterations, residual } => {
            json!({ "method": method, "iterations": iterations, "residual": residual })
        }
        Error::Divergence { residual_history, .. } => json!({ "residual_history": residual_history }),
        Error::FixedPoint { update_history } => json!({ "update_history": update_history }),
        Error::StepRejected { dt, dt_max } => json!({ "dt": dt, "dt_max": dt_max }),
        Error::Verification { t, scheme_suspect, trajectory, .. } => json!({
            "t": t,
            "scheme_suspect": scheme_suspect,
            "samples_recorded": trajectory.samples.len(),
        }),
        Error::TrivialBranch { max_w } => json!({ "max_w": max_w }),
        _ => Value::Null,
    };
    if !extra.is_null() {
        doc["details"] = extra;
    }
    doc
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if !common.set.is_empty() {
        let lines: Vec<&str> = common.set.iter().map(|s| s.as_str()).collect();
        cfg.apply(&lines.join("\n"))?;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_count() -> Option<usize> {
    std::env::var("CHEMOLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            if code != EXIT_OK {
                eprintln!("{}", json!({ "error": "usage", "message": e.kind().to_string(), "exit_code": code }));
            }
            return code;
        }
    };
    let (name, common) = match &cli.cmd {
        Cmd::Steady(c) => ("steady", c),
        Cmd::Evolve(c) => ("evolve", c),
        Cmd::Verify(c) => ("verify", c),
        Cmd::Constants(c) => ("constants", c),
        Cmd::SweepGamma(c) => ("sweep-gamma", c),
        Cmd::Oracle(c) => ("oracle", c),
    };
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", error_document(&e));
            return exit_code(&e);
        }
    };
    let dir = cfg.output_dir.clone();
    if let Err(e) = fs::create_dir_all(&dir) {
        let e = Error::Io(e);
        eprintln!("{}", error_document(&e));
        return exit_code(&e);
    }
    let run = || -> Result<i32> {
        write(&dir, "config_echo.conf", &cfg.echo())?;
        match name {
            "steady" => cmd_steady(&cfg, &dir),
            "evolve" => cmd_evolve(&cfg, &dir),
            "verify" => cmd_verify(&cfg, &dir),
            "constants" => cmd_constants(&cfg, &dir),
            "sweep-gamma" => cmd_sweep_gamma(&cfg, &dir),
            _ => cmd_oracle(&dir),
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count() {
        builder = builder.num_threads(n);
    }
    let result = match builder.build() {
        Ok(pool) => pool.install(run),
        Err(e) => Err(Error::config("CHEMOLAB_THREADS", e.to_string())),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let doc = error_document(&e);
            let _ = fs::write(dir.join("error.json"), to_json(&doc));
            eprintln!("{doc}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_echo() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.params.gamma, 0.05);
        assert_eq!(cfg.resolution, vec![201]);
        let again = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        match RunConfig::parse("gama = 0.1") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "gama"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("gamma = 0.1\ngamma = 0.2").is_err());
        assert!(RunConfig::parse("gamma 0.1").is_err());
    }

    #[test]
    fn specs_parse() {
        let c = RunConfig::parse(
            "domain_spec = rectangle 0, 0, 2, 1\nresolution = 11, 6\ng_spec = cosine-bump 1, 0.5, 1, 0.5\nu0_spec = gaussian-bump 1, 0.5, 0.2, 0.3, 1",
        )
        .unwrap();
        assert_eq!(c.resolution, vec![11, 6]);
        let g = c.grid().unwrap();
        let u = c.u0_spec.field(&g).unwrap();
        assert!(u.min() >= 1.0 && u.max() <= 1.3 + 1e-12);
        assert!(RunConfig::parse("resolution = 11, 6").is_err());
        assert!(RunConfig::parse("u0_spec = cosine 1, 2, 1").is_ok());
        let c = RunConfig::parse("u0_spec = cosine 1, 2, 1").unwrap();
        assert!(c.u0_spec.field(&c.grid().unwrap()).is_err());
    }

    #[test]
    fn perturbed_constant_reproducible() {
        let c = RunConfig::parse("u0_spec = perturbed-constant 1, 0.2, 7\nresolution = 21").unwrap();
        let g = c.grid().unwrap();
        assert_eq!(c.u0_spec.field(&g).unwrap().values(), c.u0_spec.field(&g).unwrap().values());
    }

    #[test]
    fn field_csv_layout() {
        let g = mesh::build_grid(
            &DomainSpec::Rectangle {
                lower: [0.0, 0.0],
                upper: [1.0, 1.0],
            },
            &[3, 3],
        )
        .unwrap();
        let f = ScalarField::from_fn(&g, |x| x[0] + 10.0 * x[1]);
        let csv = field_csv(&f);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,value");
        assert_eq!(lines.len(), 10);
        assert!(lines[2].starts_with("5.0000000000000000e-1,0.0000000000000000e0,"));
    }

    #[test]
    fn missing_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run_cli([
            "chemolab",
            "steady",
            "--config",
            dir.path().join("nope.conf").to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert!(!out.exists());
        assert_eq!(run_cli(["chemolab", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn constants_flags_large_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_cli([
            "chemolab",
            "constants",
            "--output-dir",
            dir.path().to_str().unwrap(),
            "--set",
            "gamma=3",
            "--set",
            "resolution=41",
        ]);
        assert_eq!(code, EXIT_OK);
        let doc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("constants.json")).unwrap()).unwrap();
        let f1 = doc["checks"].as_array().unwrap().iter().find(|c| c["name"] == "F1(gamma) > 0").unwrap();
        assert_eq!(f1["pass"], false);
        assert_eq!(doc["details"]["in_uniqueness_regime"], false);
    }
}
