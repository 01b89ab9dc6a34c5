//! Threshold constants, decay-rate fits and the checks that tie a computed
//! trajectory to the exponential convergence estimate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{self, MoserChain, TrajectoryRecord};
use crate::mesh::{self, ScalarField};
use crate::steady::{self, ModelParams, SteadyStatePair};

/// One checked inequality `lhs ≤ rhs`.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

impl Check {
    pub fn le(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Check {
            name: name.into(),
            lhs,
            rhs,
            margin: rhs - lhs,
            pass: lhs <= rhs,
        }
    }

    /// `lhs ≥ rhs`, reported with margin `lhs − rhs`.
    pub fn ge(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Check {
            name: name.into(),
            lhs,
            rhs,
            margin: lhs - rhs,
            pass: lhs >= rhs,
        }
    }
}

/// F_{e2*}(γ) = (λ/μ)(e^{−γ} − 1) + min{inf u₀, λ/(μ+γ)}
///            − γ²(e^γ/4λ)(λe^γ/μ)² − γ‖g‖∞ c₁(½)/(2μ)
pub fn f_e2_star(gamma: f64, lambda: f64, mu: f64, g_sup: f64, c_t: f64, inf_u0: f64) -> f64 {
    let r = lambda / mu;
    r * ((-gamma).exp() - 1.0) + inf_u0.min(lambda / (mu + gamma))
        - gamma * gamma * gamma.exp() / (4.0 * lambda) * (r * gamma.exp()).powi(2)
        - gamma * g_sup * mesh::trace_c1(c_t, 0.5) / (2.0 * mu)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayThreshold {
    pub f_e2_star: f64,
    /// Largest γ with F_{e2*} > 0 and F₁ > 0.
    pub gamma_star_prime: f64,
}

/// Evaluates F_{e2*} at `params.gamma` and locates γ*′ by bisection.
pub fn compute_f_e2_star(params: &ModelParams, inf_u0: f64, c_t: f64, g_sup: f64) -> Result<DecayThreshold> {
    for (name, v) in [("inf_u0", inf_u0), ("c_t", c_t), ("g_sup", g_sup)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    params.validate()?;
    let (l, m) = (params.lambda, params.mu);
    let f = |g: f64| f_e2_star(g, l, m, g_sup, c_t, inf_u0).min(steady::f1(g, g_sup));
    Ok(DecayThreshold {
        f_e2_star: f_e2_star(params.gamma, l, m, g_sup, c_t, inf_u0),
        gamma_star_prime: steady::bisect_decreasing(f, 2.0 / g_sup, 1e-12),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantsReport {
    pub c_t: f64,
    pub c_gn: f64,
    /// c₁(½) = C_T⁴/2 + ½
    pub c1_eps: f64,
    /// c₁′(½) = C₄(1 + 2^{n/2})
    pub c1_prime_eps: f64,
    pub gamma: f64,
    pub g_sup: f64,
    pub gamma_star: f64,
    pub gamma_star_prime: f64,
    pub f1_at_gamma: f64,
    pub f2_at_gamma: f64,
    pub f_e2_star_at_gamma: f64,
    pub inf_u0: f64,
    pub moser: MoserChain,
    /// c₆* for s = 4: ‖u₀ − U‖₂^{1/2} (c₅* + (λ/μ)e^γ)^{1/2}; present when a
    /// steady reference is supplied.
    pub c6s_s4: Option<f64>,
    pub notes: Vec<String>,
}

impl ConstantsReport {
    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::ge("F1(gamma) > 0", self.f1_at_gamma, 0.0),
            Check::ge("F2(gamma) > 0", self.f2_at_gamma, 0.0),
            Check::le("gamma < gamma_star", self.gamma, self.gamma_star),
            Check::ge("F_e2*(gamma) > 0", self.f_e2_star_at_gamma, 0.0),
            Check::le("gamma < gamma_star_prime", self.gamma, self.gamma_star_prime),
        ]
    }

    /// Strict versions of the sign checks (`Check::ge` admits equality).
    pub fn in_uniqueness_regime(&self) -> bool {
        self.f1_at_gamma > 0.0 && self.f2_at_gamma > 0.0 && self.gamma < self.gamma_star
    }

    pub fn in_convergence_regime(&self) -> bool {
        self.f1_at_gamma > 0.0 && self.f_e2_star_at_gamma > 0.0 && self.gamma < self.gamma_star_prime
    }
}

/// Collects every constant for a grid, data set and optional steady state.
pub fn constants_report(
    params: &ModelParams,
    u0: &ScalarField,
    steady: Option<&SteadyStatePair>,
) -> Result<ConstantsReport> {
    let grid = u0.grid();
    let c_t = grid.trace_constant()?;
    let c_gn = grid.gn_constant()?;
    let g_sup = params.g_sup(grid);
    let thr = steady::compute_gamma_star(params.lambda, params.mu, g_sup, c_t)?;
    let inf_u0 = u0.min();
    let dec = compute_f_e2_star(params, inf_u0, c_t, g_sup)?;
    let moser = evolve::uniform_bound_constants(params, u0)?;
    let c6s_s4 = match steady {
        Some(pair) => {
            let d0 = mesh::lp_norm(&u0.zip_map(&pair.u, |a, b| a - b), 2.0)?;
            Some(d0.sqrt() * (moser.c5s + params.ratio() * params.gamma.exp()).sqrt())
        }
        None => None,
    };
    let res: Vec<String> = grid.resolution().iter().map(|r| r.to_string()).collect();
    Ok(ConstantsReport {
        c_t,
        c_gn,
        c1_eps: mesh::trace_c1(c_t, 0.5),
        c1_prime_eps: mesh::gn_c1_prime(c_gn, grid.dim(), 0.5),
        gamma: params.gamma,
        g_sup,
        gamma_star: thr.gamma_star,
        gamma_star_prime: dec.gamma_star_prime,
        f1_at_gamma: thr.f1(params.gamma),
        f2_at_gamma: thr.f2(params.gamma),
        f_e2_star_at_gamma: dec.f_e2_star,
        inf_u0,
        moser,
        c6s_s4,
        notes: vec![
            format!("grid: {:?} resolution {}", grid.kind(), res.join("x")),
            "C_T: discrete generalized eigenproblem, maximized over the weighting parameter".into(),
            "C_GN: lower estimate from bump-family scan and projected ascent on the grid".into(),
            "gamma_star, gamma_star_prime: bisection, tolerance 1e-12".into(),
        ],
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayFit {
    /// Negative slope of `log value` against `t`.
    pub rate: f64,
    pub r_squared: f64,
    pub intercept: f64,
    pub samples: usize,
}

/// Least-squares fit of `log value = intercept − rate·t` over the samples
/// with `t` inside `window` (inclusive); all samples when `window` is `None`.
pub fn fit_decay_rate(series: &[(f64, f64)], window: Option<(f64, f64)>) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| window.is_none_or(|(a, b)| t >= a && t <= b))
        .collect();
    if pts.len() < 5 {
        return Err(Error::Domain(format!(
            "decay fit needs at least 5 samples in the window, got {}",
            pts.len()
        )));
    }
    if let Some(&(t, v)) = pts.iter().find(|&&(_, v)| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "nonpositive value {v} at t = {t}: the series has reached its floor; shrink the window"
        )));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for &(t, v) in &pts {
        let (dt, dy) = (t - tm, v.ln() - ym);
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if stt == 0.0 {
        return Err(Error::Domain("decay fit needs distinct times".into()));
    }
    let slope = sty / stt;
    let ss_res = (syy - slope * sty).max(0.0);
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(DecayFit {
        rate: -slope,
        r_squared,
        intercept: ym - slope * tm,
        samples: pts.len(),
    })
}

/// Default fit window: drops the first 10% of the samples and ends before the
/// first sample at or below `floor_factor · value(0)`.
pub fn default_fit_window(series: &[(f64, f64)], floor_factor: f64) -> Option<(f64, f64)> {
    if series.is_empty() {
        return None;
    }
    let floor = floor_factor * series[0].1;
    let start = series.len() / 10;
    let mut end = None;
    for &(t, v) in &series[start..] {
        if v <= floor {
            break;
        }
        end = Some(t);
    }
    end.map(|e| (series[start].0, e))
}

#[derive(Clone, Debug)]
pub struct ConvergenceOptions {
    /// Relative slack on the pointwise L² estimate.
    pub tol: f64,
    /// Samples whose difference is at or below this absolute level are
    /// treated as having reached the discretization floor.
    pub floor: f64,
    pub window: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub gamma: f64,
    pub gamma_star_prime: f64,
    pub f_e2_star: f64,
    /// μ F_{e2*}(γ)
    pub rate_floor: f64,
    pub l2_diff_initial: f64,
    pub floor: f64,
    pub window: Option<(f64, f64)>,
    pub fit_l2_u: Option<DecayFit>,
    /// Surrogates for the W^{2,s} decay of v − V (s = 2).
    pub fit_linf_v: Option<DecayFit>,
    pub fit_d2_v: Option<DecayFit>,
    pub checks: Vec<Check>,
    pub skipped: Vec<String>,
    /// Name and time of the first violated pointwise check.
    pub first_violation: Option<(String, f64)>,
    pub pass: bool,
}

/// Floor used by the default options: `max(h², dt) · ‖u₀ − U‖₂`, but never
/// below a rounding level relative to λ/μ.
pub fn discretization_floor(traj: &TrajectoryRecord, dt: f64, params: &ModelParams) -> f64 {
    let h = traj.grid.h_max();
    let d0 = traj.samples.first().and_then(|s| s.l2_diff_u).unwrap_or(0.0);
    (h * h).max(dt) * d0 + 1e-9 * params.ratio()
}

/// Checks a trajectory against the exponential L² estimate, its L^s
/// interpolation consequences, and the decay of the signal surrogates.
pub fn check_convergence_theorem(
    traj: &TrajectoryRecord,
    steady: &SteadyStatePair,
    params: &ModelParams,
    constants: &ConstantsReport,
    opts: &ConvergenceOptions,
) -> Result<ConvergenceReport> {
    if !std::sync::Arc::ptr_eq(&traj.grid, steady.u.grid()) && traj.grid.len() != steady.u.grid().len() {
        return Err(Error::Precondition("trajectory and steady pair live on different grids".into()));
    }
    if !constants.in_convergence_regime() {
        return Err(Error::Precondition(format!(
            "gamma = {} is not below gamma_star_prime = {} (F_e2* = {}, F1 = {}); the estimate gives no guarantee",
            params.gamma, constants.gamma_star_prime, constants.f_e2_star_at_gamma, constants.f1_at_gamma
        )));
    }
    if traj.samples.iter().any(|s| s.l2_diff_u.is_none()) {
        return Err(Error::Precondition("trajectory was recorded without a steady reference".into()));
    }
    let rate = params.mu * constants.f_e2_star_at_gamma;
    let d0 = traj.samples[0].l2_diff_u.unwrap();
    let l_inf_cap = constants.moser.c5s + params.ratio() * params.gamma.exp();
    let mut checks = Vec::new();
    let mut first_violation: Option<(String, f64)> = None;

    // Worst-margin aggregate per inequality family; the first violation keeps
    // the earliest offending sample.
    let mut worst: std::collections::BTreeMap<&'static str, Check> = Default::default();
    let mut note = |name: &'static str, lhs: f64, rhs: f64, t: f64, fv: &mut Option<(String, f64)>| {
        let c = Check::le(name, lhs, rhs);
        if !c.pass && fv.is_none() {
            *fv = Some((name.to_string(), t));
        }
        let e = worst.entry(name).or_insert_with(|| c.clone());
        let rel = |k: &Check| k.margin / k.rhs.abs().max(f64::MIN_POSITIVE);
        if rel(&c) < rel(e) {
            *e = c;
        }
    };
    for s in &traj.samples {
        let l2 = s.l2_diff_u.unwrap();
        let li = s.linf_diff_u.unwrap();
        let l4 = s.l4_diff_u.unwrap();
        let decay = (-rate * s.t).exp();
        // Below the floor the estimate is compared against the floor itself.
        let rhs2 = (decay * d0 * (1.0 + opts.tol)).max(opts.floor);
        note("L2 decay: |u-U|_2 <= exp(-mu F t)|u0-U|_2", l2, rhs2, s.t, &mut first_violation);
        note(
            "interpolation s=4: |u-U|_4 <= |u-U|_2^(1/2) |u-U|_inf^(1/2)",
            l4,
            (l2 * li).sqrt() * (1.0 + 1e-12) + 1e-300,
            s.t,
            &mut first_violation,
        );
        note(
            "L4 decay: |u-U|_4 <= exp(-mu F t/2) c6*(4)",
            l4,
            ((-0.5 * rate * s.t).exp() * d0.sqrt() * l_inf_cap.sqrt() * (1.0 + opts.tol)).max(opts.floor),
            s.t,
            &mut first_violation,
        );
        note(
            "L-inf surrogate: |u-U|_inf <= c5* + (lambda/mu) e^gamma",
            li,
            l_inf_cap,
            s.t,
            &mut first_violation,
        );
    }
    checks.extend(worst.into_values());

    let mut skipped = Vec::new();
    let window = opts.window;
    let series = |f: &dyn Fn(&evolve::TrajectorySample) -> Option<f64>| -> Vec<(f64, f64)> {
        traj.samples.iter().filter_map(|s| f(s).map(|v| (s.t, v))).collect()
    };
    let fit = |name: &str, data: Vec<(f64, f64)>, skipped: &mut Vec<String>| match window {
        Some(w) => match fit_decay_rate(&data, Some(w)) {
            Ok(f) => Some(f),
            Err(e) => {
                skipped.push(format!("{name}: {e}"));
                None
            }
        },
        None => {
            skipped.push(format!("{name}: no samples above the discretization floor"));
            None
        }
    };
    let fit_l2_u = fit("rate of |u-U|_2", series(&|s| s.l2_diff_u), &mut skipped);
    let fit_linf_v = fit("rate of |v-V|_inf (surrogate)", series(&|s| s.linf_diff_v), &mut skipped);
    let fit_d2_v = fit(
        "rate of second-difference norm of v-V (surrogate)",
        series(&|s| s.d2_diff_v),
        &mut skipped,
    );
    if let Some(f) = fit_l2_u {
        checks.push(Check::ge("fitted rate of |u-U|_2 >= mu F_e2*", f.rate, rate));
    }
    // s = 2: the W^{2,s} estimate decays at (2/s) μ F_{e2*} = μ F_{e2*}.
    if let Some(f) = fit_linf_v {
        checks.push(Check::ge("surrogate: fitted rate of |v-V|_inf >= mu F_e2*", f.rate, rate));
    }
    if let Some(f) = fit_d2_v {
        checks.push(Check::ge(
            "surrogate: fitted rate of second differences of v-V >= mu F_e2*",
            f.rate,
            rate,
        ));
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(ConvergenceReport {
        gamma: params.gamma,
        gamma_star_prime: constants.gamma_star_prime,
        f_e2_star: constants.f_e2_star_at_gamma,
        rate_floor: rate,
        l2_diff_initial: d0,
        floor: opts.floor,
        window,
        fit_l2_u,
        fit_linf_v,
        fit_d2_v,
        checks,
        skipped,
        first_violation,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn exact_exponential_fit() {
        let s: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.1, (-2.0 * i as f64 * 0.1).exp())).collect();
        let f = fit_decay_rate(&s, None).unwrap();
        assert!((f.rate - 2.0).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_series_has_zero_rate() {
        let s: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0)).collect();
        assert_eq!(fit_decay_rate(&s, None).unwrap().rate, 0.0);
    }

    #[test]
    fn fit_rejects_floor_and_short_windows() {
        let mut s: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 1.0 / (1.0 + i as f64))).collect();
        assert!(fit_decay_rate(&s, Some((0.0, 3.0))).is_err());
        s[4].1 = 0.0;
        assert!(matches!(fit_decay_rate(&s, None), Err(Error::Domain(_))));
    }

    #[test]
    fn fit_invariant_under_scaling() {
        let s: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.3, (-(i as f64) * 0.2).exp() * (1.0 + 0.1 * (i as f64).sin()))).collect();
        let k: Vec<(f64, f64)> = s.iter().map(|&(t, v)| (t, 37.5 * v)).collect();
        let (a, b) = (fit_decay_rate(&s, None).unwrap(), fit_decay_rate(&k, None).unwrap());
        assert!((a.rate - b.rate).abs() < 1e-12);
        assert!((a.r_squared - b.r_squared).abs() < 1e-12);
    }

    #[test]
    fn f_e2_star_limits() {
        let c_t = 2f64.sqrt();
        let v = f_e2_star(1e-9, 1.0, 1.0, 1.0, c_t, 0.5);
        assert!((v - 0.5).abs() < 1e-6);
        let v = f_e2_star(1e-9, 1.0, 1.0, 1.0, c_t, 3.0);
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gamma_star_prime_matches_dense_scan() {
        let c_t = 2f64.sqrt();
        let p = ModelParams { gamma: 0.05, ..base() };
        let d = compute_f_e2_star(&p, 0.5, c_t, 1.0).unwrap();
        let scan = crate::oracle::dense_scan_last_positive(
            |g| f_e2_star(g, 1.0, 1.0, 1.0, c_t, 0.5).min(steady::f1(g, 1.0)),
            0.0,
            2.0,
            1e-6,
        );
        assert!((d.gamma_star_prime - scan).abs() <= 1e-6);
        assert!(d.f_e2_star > 0.0 && p.gamma < d.gamma_star_prime);
    }

    #[test]
    fn default_window_skips_transient_and_floor() {
        let s: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 * 0.1, (-(i as f64) * 0.1).exp().max(1e-3))).collect();
        let (a, b) = default_fit_window(&s, 1e-3).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert!(b < 6.91 && b > 6.5);
    }
}
