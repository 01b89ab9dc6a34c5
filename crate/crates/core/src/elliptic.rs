//! Nonlinear solvers for the two stationary subproblems.
//!
//! * signal: `ΔV = V W e^V` in Ω, `∂_ν V = (γ − V) g` on ∂Ω, for given `W ≥ 0`;
//! * density (transformed variable `W = U e^{−V}`):
//!   `0 = ∇·(e^V ∇W) + λ W e^V − μ (W e^V)²` in Ω, `∂_ν W = 0` on ∂Ω.
//!
//! Both are discretized with the integrated operators of [`crate::linops`]
//! and solved by a shared damped Newton engine. Residuals are reported per
//! unit cell measure (integrated rows divided by the volume weight), so the
//! tolerances read as pointwise PDE residuals.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{self, SparseOperator};
use crate::mesh::{Grid, ScalarField};
use crate::steady::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tol_residual: f64,
    pub tol_step: f64,
    pub max_iter: usize,
    pub damping_min: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol_residual: 1e-8,
            tol_step: 1e-12,
            max_iter: 50,
            damping_min: 1.0 / 1024.0,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_residual > 0.0) {
            return Err(Error::config("newton_tol_residual", "must be positive"));
        }
        if !(self.tol_step > 0.0) {
            return Err(Error::config("newton_tol_step", "must be positive"));
        }
        if self.max_iter < 1 {
            return Err(Error::config("newton_max_iter", "must be at least 1"));
        }
        if !(self.damping_min > 0.0 && self.damping_min <= 1.0) {
            return Err(Error::config("newton_damping_min", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct NewtonReport {
    pub iterations: usize,
    /// ‖residual‖∞ before the first step and after every accepted step.
    pub residual_history: Vec<f64>,
    pub damping_history: Vec<f64>,
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Damped Newton iteration on a nodal residual.
///
/// Converges when the accepted step satisfies `‖δ‖∞ ≤ tol_step`, or once
/// `‖r‖∞ ≤ tol_residual` after at most one further polishing step (skipped
/// when the residual is already far below the tolerance). Each step is halved until the residual decreases; if
/// that requires a damping below `damping_min` the iteration is declared
/// divergent.
pub fn newton_solve<R, J>(
    mut residual_fn: R,
    mut jacobian_fn: J,
    init: &ScalarField,
    cfg: &NewtonConfig,
) -> Result<(ScalarField, NewtonReport)>
where
    R: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> Result<SparseOperator>,
{
    cfg.validate()?;
    let grid = Arc::clone(init.grid());
    let mut x = init.values().to_vec();
    let mut r = residual_fn(&x);
    let mut rn = inf_norm(&r);
    let mut report = NewtonReport {
        iterations: 0,
        residual_history: vec![rn],
        damping_history: Vec::new(),
    };
    let diverged = |x: Vec<f64>, report: NewtonReport| Error::Divergence {
        last_iterate: x,
        residual_history: report.residual_history,
    };
    for k in 1..=cfg.max_iter {
        let jac = jacobian_fn(&x)?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = linops::solve_linear(&jac, &neg_r, 1e-13)?;
        let step = inf_norm(&delta);

        if rn <= cfg.tol_residual {
            // Already within tolerance: one polishing step, kept only if it
            // does not make the residual worse than the tolerance.
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let rt = residual_fn(&trial);
            let rtn = inf_norm(&rt);
            if rtn.is_finite() && rtn <= rn.max(cfg.tol_residual) {
                x = trial;
                report.iterations = k;
                report.residual_history.push(rtn);
                report.damping_history.push(1.0);
            }
            return Ok((ScalarField::new(&grid, x)?, report));
        }

        let mut alpha = 1.0;
        let mut trial = vec![0.0; x.len()];
        let (r_new, rn_new) = loop {
            for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&delta) {
                *t = xi + alpha * di;
            }
            let rt = residual_fn(&trial);
            let rtn = inf_norm(&rt);
            if rtn.is_finite() && rtn < rn {
                break (rt, rtn);
            }
            if step <= cfg.tol_step {
                // At the rounding floor: the step itself certifies convergence.
                break (rt, rtn);
            }
            alpha *= 0.5;
            if alpha < cfg.damping_min {
                report.iterations = k;
                return Err(diverged(x, report));
            }
        };
        x.copy_from_slice(&trial);
        r = r_new;
        rn = rn_new;
        report.iterations = k;
        report.residual_history.push(rn);
        report.damping_history.push(alpha);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(diverged(x, report));
        }
        if alpha * step <= cfg.tol_step || rn <= 1e-3 * cfg.tol_residual {
            return Ok((ScalarField::new(&grid, x)?, report));
        }
    }
    if rn <= cfg.tol_residual {
        return Ok((ScalarField::new(&grid, x)?, report));
    }
    Err(diverged(x, report))
}

/// Signal-problem residual `(A V + |cell|·V W e^V − |∂cell|·γ g) / |cell|`.
struct SignalSystem<'a> {
    grid: &'a Grid,
    base: SparseOperator,
    w: &'a [f64],
    boundary_rhs: Vec<f64>,
}

impl<'a> SignalSystem<'a> {
    fn new(grid: &'a Grid, w: &'a [f64], params: &ModelParams) -> Result<Self> {
        let n = grid.len();
        let g = params.g_field(grid);
        let base = linops::assemble_robin_elliptic(grid, &vec![1.0; n], &vec![0.0; n], &g)?;
        let boundary_rhs = grid
            .boundary_weights()
            .iter()
            .zip(&g)
            .map(|(b, gi)| b * params.gamma * gi)
            .collect();
        Ok(SignalSystem {
            grid,
            base,
            w,
            boundary_rhs,
        })
    }

    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let vw = self.grid.volume_weights();
        let mut r = self.base.apply(v);
        for i in 0..r.len() {
            r[i] += vw[i] * v[i] * self.w[i] * v[i].exp() - self.boundary_rhs[i];
            r[i] /= vw[i];
        }
        r
    }

    fn jacobian(&self, v: &[f64]) -> SparseOperator {
        let vw = self.grid.volume_weights();
        let mut j = self.base.clone();
        let d: Vec<f64> = (0..v.len())
            .map(|i| vw[i] * self.w[i] * (1.0 + v[i]) * v[i].exp())
            .collect();
        j.add_diag(&d);
        j.scale_rows(&vw.iter().map(|w| 1.0 / w).collect::<Vec<_>>());
        j
    }
}

/// Solves the signal problem for `V[W]` from the default guess `V ≡ γ/2`.
pub fn solve_signal(
    w: &ScalarField,
    params: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(ScalarField, NewtonReport)> {
    let init = ScalarField::constant(w.grid(), 0.5 * params.gamma);
    solve_signal_from(w, &init, params, cfg)
}

/// Signal solve from an explicit initial guess.
pub fn solve_signal_from(
    w: &ScalarField,
    init: &ScalarField,
    params: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(ScalarField, NewtonReport)> {
    params.validate()?;
    let grid = w.grid();
    if let Some(i) = w.values().iter().position(|&x| x < 0.0) {
        return Err(Error::Precondition(format!(
            "signal solve needs W >= 0, got {} at node {i}",
            w.values()[i]
        )));
    }
    if w.values().iter().all(|&x| x == 0.0) {
        // The discrete problem is linear with the constant as exact solution.
        return Ok((ScalarField::constant(grid, params.gamma), NewtonReport::default()));
    }
    let sys = SignalSystem::new(grid, w.values(), params)?;
    let (v, report) = newton_solve(
        |x| sys.residual(x),
        |x| Ok(sys.jacobian(x)),
        init,
        cfg,
    )?;

    let slack = 1e-10;
    let gamma = params.gamma;
    for (i, &vi) in v.values().iter().enumerate() {
        if vi < -slack || vi > gamma + slack {
            return Err(Error::Invariant(format!(
                "signal bound 0 <= V <= gamma violated at node {i}: V = {vi}, gamma = {gamma}"
            )));
        }
        if !grid.is_boundary(i) && !(vi > 0.0 && vi < gamma) {
            return Err(Error::Invariant(format!(
                "strict signal bound violated at interior node {i}: V = {vi}"
            )));
        }
    }
    Ok((v, report))
}

struct DensitySystem<'a> {
    grid: &'a Grid,
    base: SparseOperator,
    ev: Vec<f64>,
    lambda: f64,
    mu: f64,
}

impl<'a> DensitySystem<'a> {
    fn new(grid: &'a Grid, v: &[f64], params: &ModelParams) -> Result<Self> {
        let ev: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let base = linops::assemble_neumann(grid, &ev, &vec![0.0; grid.len()])?;
        Ok(DensitySystem {
            grid,
            base,
            ev,
            lambda: params.lambda,
            mu: params.mu,
        })
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let vw = self.grid.volume_weights();
        let mut r = self.base.apply(w);
        for i in 0..r.len() {
            let u = w[i] * self.ev[i];
            r[i] = r[i] / vw[i] - (self.lambda * u - self.mu * u * u);
        }
        r
    }

    fn jacobian(&self, w: &[f64]) -> SparseOperator {
        let vw = self.grid.volume_weights();
        let mut j = self.base.clone();
        let d: Vec<f64> = (0..w.len())
            .map(|i| {
                let e = self.ev[i];
                -vw[i] * (self.lambda * e - 2.0 * self.mu * w[i] * e * e)
            })
            .collect();
        j.add_diag(&d);
        j.scale_rows(&vw.iter().map(|w| 1.0 / w).collect::<Vec<_>>());
        j
    }
}

/// Solves the transformed density problem for `W[V]` from the default guess
/// `W ≡ (λ/μ) e^{−mean V}`.
pub fn solve_density_steady(
    v: &ScalarField,
    params: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(ScalarField, NewtonReport)> {
    let init = ScalarField::constant(v.grid(), params.lambda / params.mu * (-v.mean()).exp());
    solve_density_from(v, &init, params, cfg)
}

pub fn solve_density_from(
    v: &ScalarField,
    init: &ScalarField,
    params: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(ScalarField, NewtonReport)> {
    params.validate()?;
    let grid = v.grid();
    let sys = DensitySystem::new(grid, v.values(), params)?;
    let (w, report) = newton_solve(
        |x| sys.residual(x),
        |x| Ok(sys.jacobian(x)),
        init,
        cfg,
    )?;

    let ratio = params.lambda / params.mu;
    let max_w = w.max();
    if max_w < 1e-8 * ratio {
        return Err(Error::TrivialBranch { max_w });
    }
    let lo = ratio * (-v.max()).exp();
    let hi = ratio * (-v.min()).exp();
    let slack = 1e-8;
    for (i, &wi) in w.values().iter().enumerate() {
        if !(wi > 0.0) || wi < lo - slack || wi > hi + slack {
            return Err(Error::Invariant(format!(
                "density bound [{lo}, {hi}] violated at node {i}: W = {wi}"
            )));
        }
    }
    Ok((w, report))
}

/// Independent check of the density residual (used by reports and tests).
pub fn density_residual(w: &ScalarField, v: &ScalarField, params: &ModelParams) -> Result<f64> {
    let sys = DensitySystem::new(w.grid(), v.values(), params)?;
    Ok(inf_norm(&sys.residual(w.values())))
}

pub fn signal_residual(v: &ScalarField, w: &ScalarField, params: &ModelParams) -> Result<f64> {
    let sys = SignalSystem::new(v.grid(), w.values(), params)?;
    Ok(inf_norm(&sys.residual(v.values())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid, DomainSpec};
    use rand::{Rng, SeedableRng};

    fn unit(n: usize) -> Arc<Grid> {
        build_grid(&DomainSpec::unit_interval(), &[n]).unwrap()
    }

    fn params(gamma: f64) -> ModelParams {
        ModelParams {
            gamma,
            ..ModelParams::default()
        }
    }

    #[test]
    fn newton_affine_one_step() {
        let g = unit(11);
        let op = linops::assemble_robin_elliptic(&g, &[1.0; 11], &[1.0; 11], &[1.0; 11]).unwrap();
        let b: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let res = |x: &[f64]| {
            let mut r = op.apply(x);
            r.iter_mut().zip(&b).for_each(|(ri, bi)| *ri -= bi);
            r
        };
        let (_, rep) = newton_solve(
            res,
            |_| Ok(op.clone()),
            &ScalarField::constant(&g, 3.0),
            &NewtonConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.damping_history, vec![1.0]);
    }

    #[test]
    fn newton_quadratic_nodewise() {
        let g = unit(9);
        let cfg = NewtonConfig {
            tol_residual: 1e-14,
            tol_step: 1e-300,
            ..NewtonConfig::default()
        };
        let (x, rep) = newton_solve(
            |x| x.iter().map(|v| v * v - 4.0).collect(),
            |x| {
                Ok(SparseOperator::from_triplets(
                    x.len(),
                    x.iter().enumerate().map(|(i, v)| (i, i, 2.0 * v)).collect(),
                    linops::BoundaryTag::Flux,
                ))
            },
            &ScalarField::constant(&g, 3.0),
            &cfg,
        )
        .unwrap();
        assert!(x.values().iter().all(|v| (v - 2.0).abs() < 1e-14));
        // e_{k+1} ≈ e_k² / (2·2): residual ratios r_{k+1}/r_k² bounded.
        let h = &rep.residual_history;
        for k in 1..h.len() - 1 {
            if h[k + 1] > 1e-12 {
                assert!(h[k + 1] / (h[k] * h[k]) < 1.0, "{h:?}");
            }
        }
    }

    #[test]
    fn newton_divergence_reports_history() {
        let g = unit(3);
        // x² + 1 = 0 has no real root.
        let cfg = NewtonConfig {
            max_iter: 5,
            ..NewtonConfig::default()
        };
        let err = newton_solve(
            |x| x.iter().map(|v| v * v + 1.0).collect(),
            |x| {
                Ok(SparseOperator::from_triplets(
                    x.len(),
                    x.iter().enumerate().map(|(i, v)| (i, i, 2.0 * v)).collect(),
                    linops::BoundaryTag::Flux,
                ))
            },
            &ScalarField::constant(&g, 0.5),
            &cfg,
        )
        .unwrap_err();
        match err {
            Error::Divergence {
                residual_history, ..
            } => assert!(!residual_history.is_empty()),
            e => panic!("unexpected {e}"),
        }
    }

    fn fd_check(res: &dyn Fn(&[f64]) -> Vec<f64>, jac: &SparseOperator, x: &[f64]) -> f64 {
        let n = x.len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let eps = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += eps;
            xm[j] -= eps;
            let (rp, rm) = (res(&xp), res(&xm));
            let scale = (0..n).map(|i| jac.get(i, j).abs()).fold(0.0, f64::max);
            for i in 0..n {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                worst = worst.max((fd - jac.get(i, j)).abs() / scale.max(1e-300));
            }
        }
        worst
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let g = unit(15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = params(0.7);
        let w: Vec<f64> = (0..15).map(|_| rng.gen_range(0.2..1.5)).collect();
        let v: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..0.7)).collect();
        let sig = SignalSystem::new(&g, &w, &p).unwrap();
        let e1 = fd_check(&|x| sig.residual(x), &sig.jacobian(&v), &v);
        assert!(e1 < 1e-6, "signal jacobian discrepancy {e1}");
        let den = DensitySystem::new(&g, &v, &p).unwrap();
        let e2 = fd_check(&|x| den.residual(x), &den.jacobian(&w), &w);
        assert!(e2 < 1e-6, "density jacobian discrepancy {e2}");
    }

    #[test]
    fn signal_with_zero_density_is_gamma() {
        let g = unit(21);
        let w = ScalarField::constant(&g, 0.0);
        let (v, _) = solve_signal(&w, &params(0.8), &NewtonConfig::default()).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.8));
    }

    #[test]
    fn signal_rejects_negative_density() {
        let g = unit(5);
        let w = ScalarField::new(&g, vec![1.0, -0.1, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            solve_signal(&w, &params(1.0), &NewtonConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn signal_bounds_random_density() {
        let g = unit(41);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let gamma = rng.gen_range(0.05..3.0);
            let w = ScalarField::new(&g, (0..41).map(|_| rng.gen_range(0.0..4.0)).collect()).unwrap();
            let (v, _) = solve_signal(&w, &params(gamma), &NewtonConfig::default()).unwrap();
            assert!(v.min() > 0.0 && v.max() < gamma);
        }
    }

    #[test]
    fn signal_unique_from_distinct_guesses() {
        let g = unit(101);
        let p = params(1.0);
        let w = ScalarField::from_fn(&g, |x| 1.0 + 0.5 * (3.0 * x[0]).sin());
        let cfg = NewtonConfig::default();
        let (v1, _) = solve_signal_from(&w, &ScalarField::constant(&g, 0.0), &p, &cfg).unwrap();
        let (v2, _) = solve_signal_from(&w, &ScalarField::constant(&g, 1.0), &p, &cfg).unwrap();
        assert!(v1.dist_inf(&v2) < 1e-9);
    }

    #[test]
    fn signal_continuous_dependence() {
        let g = unit(81);
        let p = params(1.0);
        let cfg = NewtonConfig::default();
        let w0 = ScalarField::from_fn(&g, |x| 1.0 + x[0]);
        let (v0, _) = solve_signal(&w0, &p, &cfg).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=5 {
            let eps = 10f64.powi(-k);
            let w = w0.map(|x| x + eps);
            let (v, _) = solve_signal(&w, &p, &cfg).unwrap();
            let d = v.dist_inf(&v0);
            assert!(d < prev && d < 2.0 * eps, "eps {eps}: {d}");
            prev = d;
        }
    }

    #[test]
    fn signal_max_monotone_in_gamma() {
        let g = unit(61);
        let w = ScalarField::constant(&g, 1.0);
        let mut prev = 0.0;
        for gamma in [0.1, 0.3, 0.6, 1.0, 2.0] {
            let (v, _) = solve_signal(&w, &params(gamma), &NewtonConfig::default()).unwrap();
            assert!(v.max() >= prev);
            prev = v.max();
        }
    }

    #[test]
    fn signal_newton_quadratic() {
        let g = unit(101);
        let w = ScalarField::constant(&g, 2.0);
        let cfg = NewtonConfig {
            tol_residual: 1e-11,
            ..NewtonConfig::default()
        };
        let (_, rep) = solve_signal(&w, &params(2.0), &cfg).unwrap();
        let h = &rep.residual_history;
        assert!(h.len() >= 3, "{h:?}");
        // Once in the asymptotic regime each residual is ≲ C·previous².
        let k = h.len() - 2;
        assert!(h[k] < 1e-3 * h[k - 1] || h[k] < 1e-9, "{h:?}");
    }

    #[test]
    fn density_constant_signal() {
        let g = unit(21);
        let p = ModelParams {
            lambda: 2.0,
            mu: 0.5,
            ..params(1.0)
        };
        let v = ScalarField::constant(&g, 0.3);
        let (w, _) = solve_density_steady(&v, &p, &NewtonConfig::default()).unwrap();
        let exact = 4.0 * (-0.3f64).exp();
        assert!(w.values().iter().all(|x| (x - exact).abs() < 1e-13));
    }

    #[test]
    fn density_bounds_for_signal_profile() {
        let g = unit(201);
        let p = params(1.0);
        let cfg = NewtonConfig::default();
        let (v, _) = solve_signal(&ScalarField::constant(&g, 1.0), &p, &cfg).unwrap();
        let (w, rep) = solve_density_steady(&v, &p, &cfg).unwrap();
        let (lo, hi) = ((-v.max()).exp(), (-v.min()).exp());
        assert!(w.min() >= lo - 1e-8 && w.max() <= hi + 1e-8);
        assert!(w.max() - w.min() > 1e-4, "profile should be non-constant");
        assert!(rep.iterations <= 10);
    }

    #[test]
    fn density_trivial_branch_detected() {
        let g = unit(11);
        let v = ScalarField::constant(&g, 0.1);
        let err = solve_density_from(
            &v,
            &ScalarField::constant(&g, 0.0),
            &params(1.0),
            &NewtonConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrivialBranch { .. }));
    }
}
