//! Steady states via the composition `T[f] = W[V[f]]`.
//!
//! The iteration runs on the order interval
//! `X = { f : e^{−γ} λ/μ ≤ f ≤ λ/μ }`, which the discrete density solve maps
//! into itself; the limit `W` yields the steady pair `U = W e^V`, `V = V[W]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptic::{self, NewtonConfig};
use crate::error::{Error, Result};
use crate::mesh::{self, DomainSpec, Grid, ScalarField};

/// Boundary coefficient `g` as a function of boundary arclength `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GSpec {
    Constant { value: f64 },
    /// `base + slope · s`
    Affine { base: f64, slope: f64 },
    /// `base + amplitude · (1 + cos(π (s − center)/width)) / 2` for
    /// `|s − center| < width`, `base` elsewhere.
    CosineBump {
        base: f64,
        amplitude: f64,
        center: f64,
        width: f64,
    },
}

impl GSpec {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            GSpec::Constant { value } => value,
            GSpec::Affine { base, slope } => base + slope * s,
            GSpec::CosineBump {
                base,
                amplitude,
                center,
                width,
            } => {
                let d = s - center;
                if d.abs() < width {
                    base + amplitude * 0.5 * (1.0 + (std::f64::consts::PI * d / width).cos())
                } else {
                    base
                }
            }
        }
    }

    /// Supremum of `g` over arclengths `[0, s_max]`.
    pub fn sup(&self, s_max: f64) -> f64 {
        match *self {
            GSpec::Constant { value } => value,
            GSpec::Affine { base, slope } => base.max(base + slope * s_max),
            GSpec::CosineBump {
                base, amplitude, ..
            } => base.max(base + amplitude),
        }
    }

    pub fn inf(&self, s_max: f64) -> f64 {
        match *self {
            GSpec::Constant { value } => value,
            GSpec::Affine { base, slope } => base.min(base + slope * s_max),
            GSpec::CosineBump {
                base, amplitude, ..
            } => base.min(base + amplitude),
        }
    }
}

/// Largest boundary arclength coordinate of a grid.
pub fn arclength_extent(grid: &Grid) -> f64 {
    match grid.dim() {
        1 => 1.0,
        _ => grid.boundary_measure(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub g_spec: GSpec,
    pub domain_spec: DomainSpec,
    pub newton_cfg: NewtonConfig,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    /// Relaxation ω ∈ (0, 1] of the fixed-point update; 1 is plain Picard.
    pub relaxation: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            lambda: 1.0,
            mu: 1.0,
            gamma: 0.05,
            g_spec: GSpec::Constant { value: 1.0 },
            domain_spec: DomainSpec::unit_interval(),
            newton_cfg: NewtonConfig::default(),
            fp_tol: 1e-10,
            fp_max_iter: 500,
            relaxation: 1.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        let s_max = match &self.domain_spec {
            DomainSpec::Interval { .. } => 1.0,
            DomainSpec::Rectangle { lower, upper } => {
                2.0 * ((upper[0] - lower[0]) + (upper[1] - lower[1]))
            }
        };
        if !(self.g_spec.inf(s_max) > 0.0) {
            return Err(Error::config("g_spec", "boundary coefficient must be positive"));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::config("fp_tol", "must be positive"));
        }
        if self.fp_max_iter == 0 {
            return Err(Error::config("fp_max_iter", "must be at least 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::config("relaxation", "must lie in (0, 1]"));
        }
        self.newton_cfg.validate()
    }

    pub fn ratio(&self) -> f64 {
        self.lambda / self.mu
    }

    /// Nodal values of `g` (zero at interior nodes).
    pub fn g_field(&self, grid: &Grid) -> Vec<f64> {
        let mut g = vec![0.0; grid.len()];
        for &i in grid.boundary_nodes() {
            g[i] = self.g_spec.value(grid.arclength(i));
        }
        g
    }

    /// ‖g‖_{L∞(∂Ω)}
    pub fn g_sup(&self, grid: &Grid) -> f64 {
        self.g_spec.sup(arclength_extent(grid))
    }

    pub fn x_bounds(&self) -> (f64, f64) {
        (self.ratio() * (-self.gamma).exp(), self.ratio())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub signal_residual: f64,
    pub density_residual: f64,
    pub newton_iterations_signal: usize,
    pub newton_iterations_density: usize,
}

#[derive(Clone, Debug)]
pub struct SteadyStatePair {
    pub u: ScalarField,
    pub v: ScalarField,
    pub w: ScalarField,
    pub iterations: usize,
    pub final_update: f64,
    pub update_history: Vec<f64>,
    pub residual_report: ResidualReport,
}

/// Largest nodewise violations of the steady-state bounds.
#[derive(Clone, Debug, Serialize)]
pub struct SteadyBounds {
    /// max of (λ/μ)e^{V−γ} − U
    pub lower_u: f64,
    /// max of U − (λ/μ)e^{V}
    pub upper_u: f64,
    /// max of −V
    pub lower_v: f64,
    /// max of V − γ
    pub upper_v: f64,
}

impl SteadyBounds {
    pub fn worst(&self) -> f64 {
        self.lower_u.max(self.upper_u).max(self.lower_v).max(self.upper_v)
    }
}

impl SteadyStatePair {
    pub fn bounds(&self, params: &ModelParams) -> SteadyBounds {
        let r = params.ratio();
        let mut b = SteadyBounds {
            lower_u: f64::NEG_INFINITY,
            upper_u: f64::NEG_INFINITY,
            lower_v: f64::NEG_INFINITY,
            upper_v: f64::NEG_INFINITY,
        };
        for (&u, &v) in self.u.values().iter().zip(self.v.values()) {
            b.lower_u = b.lower_u.max(r * (v - params.gamma).exp() - u);
            b.upper_u = b.upper_u.max(u - r * v.exp());
            b.lower_v = b.lower_v.max(-v);
            b.upper_v = b.upper_v.max(v - params.gamma);
        }
        b
    }
}

/// Runs the fixed-point map from `init_w` (default `W ≡ λ/μ`).
pub fn fixed_point_steady(
    params: &ModelParams,
    grid: &Arc<Grid>,
    init_w: Option<&ScalarField>,
) -> Result<SteadyStatePair> {
    params.validate()?;
    let (lo, hi) = params.x_bounds();
    let slack = 1e-8;
    let mut w = match init_w {
        Some(f) => f.clone(),
        None => ScalarField::constant(grid, hi),
    };
    if w.min() < lo - slack || w.max() > hi + slack {
        return Err(Error::Precondition(format!(
            "initial W must lie in [{lo}, {hi}], got range [{}, {}]",
            w.min(),
            w.max()
        )));
    }
    let cfg = &params.newton_cfg;
    let omega = params.relaxation;
    let mut v_guess = ScalarField::constant(grid, 0.5 * params.gamma);
    let mut w_guess: Option<ScalarField> = None;
    let mut history = Vec::new();
    for k in 1..=params.fp_max_iter {
        let (v, _) = elliptic::solve_signal_from(&w, &v_guess, params, cfg)?;
        let (w_new, _) = match &w_guess {
            Some(g) => elliptic::solve_density_from(&v, g, params, cfg)?,
            None => elliptic::solve_density_steady(&v, params, cfg)?,
        };
        let w_next = if omega < 1.0 {
            w_new.zip_map(&w, |a, b| omega * a + (1.0 - omega) * b)
        } else {
            w_new.clone()
        };
        if w_next.min() < lo - slack || w_next.max() > hi + slack {
            return Err(Error::Invariant(format!(
                "fixed-point iterate {k} left X = [{lo}, {hi}]: range [{}, {}] (grid too coarse?)",
                w_next.min(),
                w_next.max()
            )));
        }
        let update = w_next.dist_inf(&w);
        history.push(update);
        let scale = mesh::lp_norm(&w, f64::INFINITY)?;
        v_guess = v;
        w_guess = Some(w_new);
        w = w_next;
        if update <= params.fp_tol * scale {
            return finish(params, w, v_guess, k, history);
        }
    }
    Err(Error::FixedPoint {
        update_history: history,
    })
}

fn finish(
    params: &ModelParams,
    w: ScalarField,
    v_guess: ScalarField,
    iterations: usize,
    history: Vec<f64>,
) -> Result<SteadyStatePair> {
    let cfg = &params.newton_cfg;
    let (v, rep_s) = elliptic::solve_signal_from(&w, &v_guess, params, cfg)?;
    let u = w.zip_map(&v, |a, b| a * b.exp());
    let residual_report = ResidualReport {
        signal_residual: elliptic::signal_residual(&v, &w, params)?,
        density_residual: elliptic::density_residual(&w, &v, params)?,
        newton_iterations_signal: rep_s.iterations,
        newton_iterations_density: 0,
    };
    Ok(SteadyStatePair {
        u,
        v,
        w,
        iterations,
        final_update: history.last().copied().unwrap_or(0.0),
        update_history: history,
        residual_report,
    })
}

/// Applies the map `T` once: `W[V[f]]`.
pub fn apply_fixed_point_map(params: &ModelParams, f: &ScalarField) -> Result<ScalarField> {
    let cfg = &params.newton_cfg;
    let (v, _) = elliptic::solve_signal(f, params, cfg)?;
    Ok(elliptic::solve_density_steady(&v, params, cfg)?.0)
}

/// Smallness threshold for uniqueness of the positive steady state.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct UniquenessThreshold {
    pub lambda: f64,
    pub mu: f64,
    pub g_sup: f64,
    pub c_t: f64,
    pub gamma_star: f64,
}

impl UniquenessThreshold {
    /// F₁(γ) = 1 − γ‖g‖∞/2
    pub fn f1(&self, gamma: f64) -> f64 {
        f1(gamma, self.g_sup)
    }

    pub fn f2(&self, gamma: f64) -> f64 {
        f2(gamma, self.lambda, self.mu, self.g_sup, self.c_t)
    }
}

pub fn f1(gamma: f64, g_sup: f64) -> f64 {
    1.0 - gamma * g_sup / 2.0
}

/// F₂(γ) = (λ/μ)(2e^{−γ} − 1) − γ²(e^γ/4λ)(λe^γ/μ)² − γ‖g‖∞ c₁(½)/(2μ)
pub fn f2(gamma: f64, lambda: f64, mu: f64, g_sup: f64, c_t: f64) -> f64 {
    let r = lambda / mu;
    let c1 = mesh::trace_c1(c_t, 0.5);
    r * (2.0 * (-gamma).exp() - 1.0)
        - gamma * gamma * gamma.exp() / (4.0 * lambda) * (r * gamma.exp()).powi(2)
        - gamma * g_sup * c1 / (2.0 * mu)
}

/// Bisection for the first zero of a strictly decreasing `f` on `(0, hi]`
/// with `f(0+) > 0 ≥ f(hi)`; returns the last point known positive.
pub(crate) fn bisect_decreasing(f: impl Fn(f64) -> f64, hi: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (0.0, hi);
    if f(b) > 0.0 {
        return b;
    }
    while b - a > tol {
        let m = 0.5 * (a + b);
        if f(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    a
}

/// γ*: the largest γ ∈ (0, 2/‖g‖∞) with F₁ > 0 and F₂ > 0 on (0, γ*).
pub fn compute_gamma_star(lambda: f64, mu: f64, g_sup: f64, c_t: f64) -> Result<UniquenessThreshold> {
    for (name, v) in [("lambda", lambda), ("mu", mu), ("g_sup", g_sup), ("c_t", c_t)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    let mut t = UniquenessThreshold {
        lambda,
        mu,
        g_sup,
        c_t,
        gamma_star: 0.0,
    };
    // Both F₁ and F₂ decrease strictly in γ, so min(F₁, F₂) has a single root.
    t.gamma_star = bisect_decreasing(|g| t.f1(g).min(t.f2(g)), 2.0 / g_sup, 1e-12);
    Ok(t)
}

#[derive(Clone, Debug, Serialize)]
pub struct InitOutcome {
    pub index: usize,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairDistance {
    pub i: usize,
    pub j: usize,
    pub linf_u: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct UniquenessReport {
    pub gamma: f64,
    pub gamma_star: f64,
    pub trace_constant: f64,
    pub n_inits: usize,
    pub seed: u64,
    pub outcomes: Vec<InitOutcome>,
    pub pairwise: Vec<PairDistance>,
    pub max_pairwise: f64,
}

/// Random initial field in X: i.i.d. uniform nodes, then two Jacobi
/// smoothing sweeps (neighbour averages, so the iterate stays in X).
pub fn random_init(params: &ModelParams, grid: &Arc<Grid>, seed: u64, stream: u64) -> ScalarField {
    let (lo, hi) = params.x_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut f: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(lo..=hi)).collect();
    let n = grid.len();
    for _ in 0..2 {
        let mut sum = vec![0.0; n];
        let mut cnt = vec![0.0; n];
        for e in grid.edges() {
            sum[e.a] += f[e.b];
            sum[e.b] += f[e.a];
            cnt[e.a] += 1.0;
            cnt[e.b] += 1.0;
        }
        f = sum.iter().zip(&cnt).map(|(s, c)| s / c).collect();
    }
    // Rounding in the averages can step a hair outside [lo, hi].
    f.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    ScalarField::new(grid, f).expect("finite by construction")
}

/// Fixed-point solves from `n_inits` seeded random fields in X. Per-init
/// failures are collected into the report.
pub fn uniqueness_sweep(
    params: &ModelParams,
    grid: &Arc<Grid>,
    n_inits: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    if n_inits == 0 {
        return Err(Error::Precondition("uniqueness sweep needs n_inits >= 1".into()));
    }
    params.validate()?;
    let c_t = grid.trace_constant()?;
    let threshold = compute_gamma_star(params.lambda, params.mu, params.g_sup(grid), c_t)?;

    let results: Vec<(InitOutcome, Option<ScalarField>)> = (0..n_inits)
        .into_par_iter()
        .map(|i| {
            let init = random_init(params, grid, seed, i as u64);
            match fixed_point_steady(params, grid, Some(&init)) {
                Ok(pair) => (
                    InitOutcome {
                        index: i,
                        iterations: Some(pair.iterations),
                        error: None,
                    },
                    Some(pair.u),
                ),
                Err(e) => (
                    InitOutcome {
                        index: i,
                        iterations: None,
                        error: Some(e.to_string()),
                    },
                    None,
                ),
            }
        })
        .collect();

    let mut pairwise = Vec::new();
    for i in 0..n_inits {
        for j in (i + 1)..n_inits {
            if let (Some(a), Some(b)) = (&results[i].1, &results[j].1) {
                pairwise.push(PairDistance {
                    i,
                    j,
                    linf_u: a.dist_inf(b),
                });
            }
        }
    }
    let max_pairwise = pairwise.iter().map(|p| p.linf_u).fold(0.0, f64::max);
    Ok(UniquenessReport {
        gamma: params.gamma,
        gamma_star: threshold.gamma_star,
        trace_constant: c_t,
        n_inits,
        seed,
        outcomes: results.into_iter().map(|r| r.0).collect(),
        pairwise,
        max_pairwise,
    })
}
