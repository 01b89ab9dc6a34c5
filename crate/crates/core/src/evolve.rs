//! Time integration of the parabolic–elliptic system
//!
//! ```text
//! u_t = ∇·(∇u − u∇v) + λu − μu²,   ∂_ν u − u ∂_ν v = 0,
//! Δv = v u,                         ∂_ν v = (γ − v) g,
//! ```
//!
//! with `v` recomputed from `u` by one linear Robin solve per step.
//!
//! The `u` step is semi-implicit: the drift–diffusion flux is implicit in `u`
//! with `v` frozen at the old level, growth `λu` explicit, crowding
//! linearized Patankar-style as `μ u_old u_new`. The matrix is an M-matrix and
//! the right-hand side is positive, so `u` stays positive without clipping.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linops;
use crate::mesh::{self, Grid, ScalarField};
use crate::steady::{ModelParams, SteadyStatePair};

/// Monitor tolerance coefficient in `tol = α (h² + dt)`.
///
/// Calibrated by [`calibrate_monitor_alpha`] (observed ≈ 0.052 on the shipped
/// manufactured solution) with a safety factor of about 5; a unit test keeps
/// the two in sync.
pub const DEFAULT_MONITOR_ALPHA: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct EvolutionState {
    pub t: f64,
    pub u: ScalarField,
    pub v: ScalarField,
    pub step_index: usize,
}

impl EvolutionState {
    /// State at time 0 with `v` from the elliptic solve.
    pub fn initial(u0: ScalarField, params: &ModelParams) -> Result<Self> {
        if let Some(i) = u0.values().iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Precondition(format!(
                "initial density must be positive, got {} at node {i}",
                u0.values()[i]
            )));
        }
        let v = solve_signal_linear(&u0, params)?;
        Ok(EvolutionState {
            t: 0.0,
            u: u0,
            v,
            step_index: 0,
        })
    }
}

/// Solves `Δv = v u`, `∂_ν v = (γ − v) g` for given `u ≥ 0`.
pub fn solve_signal_linear(u: &ScalarField, params: &ModelParams) -> Result<ScalarField> {
    params.validate()?;
    let grid = u.grid();
    if let Some(i) = u.values().iter().position(|&x| x < 0.0) {
        return Err(Error::Precondition(format!(
            "signal solve needs u >= 0, got {} at node {i}",
            u.values()[i]
        )));
    }
    let gamma = params.gamma;
    if u.values().iter().all(|&x| x == 0.0) {
        return Ok(ScalarField::constant(grid, gamma));
    }
    let n = grid.len();
    let g = params.g_field(grid);
    let op = linops::assemble_robin_elliptic(grid, &vec![1.0; n], u.values(), &g)?;
    let data: Vec<f64> = g.iter().map(|gi| gamma * gi).collect();
    let rhs = linops::integrated_rhs(grid, &vec![0.0; n], &data);
    let v = ScalarField::new(grid, linops::solve_linear(&op, &rhs, 1e-13)?)?;
    let slack = 1e-12 * gamma.max(1.0);
    for (i, &vi) in v.values().iter().enumerate() {
        if vi < -slack || vi > gamma + slack {
            return Err(Error::Invariant(format!(
                "signal bound 0 <= v <= gamma violated at node {i}: v = {vi}"
            )));
        }
    }
    Ok(v)
}

/// Operator of the drift–diffusion flux `∇u − u∇v = e^v ∇(u e^{−v})` in
/// integrated form, implicit in `u` for frozen `v`, plus `diag` on the
/// cell-weighted diagonal. Face coefficients use the arithmetic mean of
/// `e^v`, so a steady state of the step coincides with the discrete steady
/// problem in the transformed variable. Columns of the flux part sum to
/// zero: mass is conserved and the matrix is an M-matrix.
pub fn drift_diffusion_operator(grid: &Grid, v: &[f64], diag: &[f64]) -> linops::SparseOperator {
    let n = grid.len();
    let vw = grid.volume_weights();
    let em: Vec<f64> = v.iter().map(|x| (-x).exp()).collect();
    let mut trip = Vec::with_capacity(n + 4 * grid.edges().len());
    for i in 0..n {
        trip.push((i, i, vw[i] * diag[i]));
    }
    for e in grid.edges() {
        let k = e.face * 0.5 * (1.0 / em[e.a] + 1.0 / em[e.b]) / e.h;
        trip.push((e.a, e.a, k * em[e.a]));
        trip.push((e.a, e.b, -k * em[e.b]));
        trip.push((e.b, e.b, k * em[e.b]));
        trip.push((e.b, e.a, -k * em[e.a]));
    }
    linops::SparseOperator::from_triplets(n, trip, linops::BoundaryTag::Flux)
}

/// Advective step bound `0.45·h_min / max|∇v|` (edge difference quotients).
/// Diffusion and drift are implicit, so this limits accuracy rather than
/// stability; infinite when `v` is constant.
pub fn dt_max(grid: &Grid, v: &[f64]) -> f64 {
    let grad = grid
        .edges()
        .iter()
        .map(|e| ((v[e.b] - v[e.a]) / e.h).abs())
        .fold(0.0, f64::max);
    if grad > 0.0 {
        0.45 * grid.h_min() / grad
    } else {
        f64::INFINITY
    }
}

/// Advances `u` by `dt` with prescribed `v` and an optional nodal source.
fn advance_density(
    grid: &Grid,
    u: &[f64],
    v: &[f64],
    dt: f64,
    lambda: f64,
    mu: f64,
    source: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let inv_dt = 1.0 / dt;
    let diag: Vec<f64> = u.iter().map(|ui| inv_dt + mu * ui).collect();
    let op = drift_diffusion_operator(grid, v, &diag);
    let vw = grid.volume_weights();
    let rhs: Vec<f64> = (0..grid.len())
        .map(|i| {
            let s = source.map_or(0.0, |s| s[i]);
            vw[i] * (u[i] * (inv_dt + lambda) + s)
        })
        .collect();
    linops::solve_linear(&op, &rhs, 1e-14)
}

/// One IMEX step of the coupled system.
pub fn step(state: &EvolutionState, dt: f64, params: &ModelParams) -> Result<EvolutionState> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let grid = state.u.grid();
    let limit = dt_max(grid, state.v.values());
    if dt > limit {
        return Err(Error::StepRejected { dt, dt_max: limit });
    }
    let u_new = advance_density(
        grid,
        state.u.values(),
        state.v.values(),
        dt,
        params.lambda,
        params.mu,
        None,
    )?;
    if let Some(i) = u_new.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Invariant(format!(
            "positivity lost at node {i} (u = {}) in step {} at t = {}",
            u_new[i],
            state.step_index + 1,
            state.t + dt
        )));
    }
    let u = ScalarField::new(grid, u_new)?;
    let v = solve_signal_linear(&u, params)?;
    Ok(EvolutionState {
        t: state.t + dt,
        u,
        v,
        step_index: state.step_index + 1,
    })
}

/// Logistic sub-solution `y' = λy − (μ+γ)y²`, `y(0) = y0`, in closed form.
pub fn sub_solution(t: f64, y0: f64, lambda: f64, mu: f64, gamma: f64) -> f64 {
    let k = mu + gamma;
    lambda * y0 / (k * y0 + (lambda - k * y0) * (-lambda * t).exp())
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub l1_u: f64,
    pub l2_u: f64,
    pub linf_u: f64,
    pub min_u: f64,
    pub min_v: f64,
    pub max_v: f64,
    pub y_sub: f64,
    /// Differences to the steady reference; `None` without a reference.
    pub l2_diff_u: Option<f64>,
    pub linf_diff_u: Option<f64>,
    pub l4_diff_u: Option<f64>,
    pub linf_diff_v: Option<f64>,
    pub d2_diff_v: Option<f64>,
    /// Time step in use when the sample was taken.
    pub dt: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub u: ScalarField,
    pub v: ScalarField,
}

#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub grid: Arc<Grid>,
    pub samples: Vec<TrajectorySample>,
    pub snapshots: Vec<Snapshot>,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Largest `‖u‖∞` over every accepted step (not only samples).
    pub sup_linf_u: f64,
}

impl TrajectoryRecord {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub const CSV_HEADER: &'static str =
        "t,l1_u,l2_u,linf_u,min_u,min_v,max_v,y_sub,l2_diff_u,linf_diff_v,d2_diff_v";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let f = |x: f64| format!("{x:.16e}");
        let o = |x: Option<f64>| x.map(f).unwrap_or_default();
        for r in &self.samples {
            let row = [
                f(r.t),
                f(r.l1_u),
                f(r.l2_u),
                f(r.linf_u),
                f(r.min_u),
                f(r.min_v),
                f(r.max_v),
                f(r.y_sub),
                o(r.l2_diff_u),
                o(r.linf_diff_v),
                o(r.d2_diff_v),
            ];
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub t_end: f64,
    pub dt: f64,
    /// Time between recorded samples.
    pub sample_every: f64,
    pub snapshot_times: Vec<f64>,
    pub monitor_alpha: f64,
    /// Abort with a verification error when a monitor fails.
    pub enforce_monitors: bool,
}

impl SimulationConfig {
    pub fn new(t_end: f64, dt: f64, sample_every: f64) -> Self {
        SimulationConfig {
            t_end,
            dt,
            sample_every,
            snapshot_times: Vec::new(),
            monitor_alpha: DEFAULT_MONITOR_ALPHA,
            enforce_monitors: true,
        }
    }
}

fn sample(
    state: &EvolutionState,
    y: f64,
    dt: f64,
    steady: Option<&SteadyStatePair>,
) -> Result<TrajectorySample> {
    let u = &state.u;
    let grid = u.grid();
    let mut s = TrajectorySample {
        t: state.t,
        l1_u: mesh::lp_norm(u, 1.0)?,
        l2_u: mesh::lp_norm(u, 2.0)?,
        linf_u: mesh::lp_norm(u, f64::INFINITY)?,
        min_u: u.min(),
        min_v: state.v.min(),
        max_v: state.v.max(),
        y_sub: y,
        l2_diff_u: None,
        linf_diff_u: None,
        l4_diff_u: None,
        linf_diff_v: None,
        d2_diff_v: None,
        dt,
    };
    if let Some(pair) = steady {
        let du = u.zip_map(&pair.u, |a, b| a - b);
        let dv = state.v.zip_map(&pair.v, |a, b| a - b);
        s.l2_diff_u = Some(mesh::lp_norm(&du, 2.0)?);
        s.linf_diff_u = Some(mesh::lp_norm(&du, f64::INFINITY)?);
        s.l4_diff_u = Some(mesh::lp_norm(&du, 4.0)?);
        s.linf_diff_v = Some(mesh::lp_norm(&dv, f64::INFINITY)?);
        s.d2_diff_v = Some(mesh::second_difference_norm(dv.values(), grid));
    }
    Ok(s)
}

/// Integrates from `u0` to `t_end`, sampling every `sample_every` and
/// checking the positivity, signal-bound, L¹ and sub-solution monitors.
///
/// Rejected steps halve `dt`; after 20 consecutive accepted steps `dt` is
/// doubled again, up to the configured value.
pub fn simulate(
    u0: &ScalarField,
    params: &ModelParams,
    cfg: &SimulationConfig,
    steady: Option<&SteadyStatePair>,
) -> Result<TrajectoryRecord> {
    params.validate()?;
    if !(cfg.t_end > 0.0) {
        return Err(Error::config("t_end", "must be positive"));
    }
    if !(cfg.dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    if !(cfg.sample_every > 0.0) {
        return Err(Error::config("sample_every", "must be positive"));
    }
    let grid = Arc::clone(u0.grid());
    let mut state = EvolutionState::initial(u0.clone(), params)?;
    let y0 = u0.min();
    let l1_bound = mesh::lp_norm(u0, 1.0)?.max(grid.measure() * params.ratio());
    let h2 = grid.h_max().powi(2);
    let gamma = params.gamma;

    let mut rec = TrajectoryRecord {
        grid: Arc::clone(&grid),
        samples: Vec::new(),
        snapshots: Vec::new(),
        steps_accepted: 0,
        steps_rejected: 0,
        sup_linf_u: u0.max(),
    };
    let mut snapshot_times: Vec<f64> = cfg
        .snapshot_times
        .iter()
        .copied()
        .filter(|&t| (0.0..=cfg.t_end).contains(&t))
        .collect();
    snapshot_times.sort_by(f64::total_cmp);
    let mut next_snap = 0;

    let mut dt = cfg.dt;
    let mut streak = 0usize;
    let mut sample_index = 0usize;
    let mut next_sample = 0.0;
    let eps_t = 1e-12 * cfg.t_end;

    loop {
        // Record at sample and snapshot times.
        if state.t >= next_sample - eps_t {
            let y = sub_solution(state.t, y0, params.lambda, params.mu, gamma);
            let s = sample(&state, y, dt, steady)?;
            let failure = check_monitors(&s, gamma, l1_bound, cfg.monitor_alpha * (h2 + dt));
            rec.samples.push(s);
            if let (Some((msg, suspect)), true) = (failure, cfg.enforce_monitors) {
                return Err(Error::Verification {
                    t: state.t,
                    message: msg,
                    scheme_suspect: suspect,
                    trajectory: Box::new(rec),
                });
            }
            sample_index += 1;
            next_sample = (sample_index as f64 * cfg.sample_every).min(cfg.t_end);
        }
        while next_snap < snapshot_times.len() && state.t >= snapshot_times[next_snap] - eps_t {
            rec.snapshots.push(Snapshot {
                t: state.t,
                u: state.u.clone(),
                v: state.v.clone(),
            });
            next_snap += 1;
        }
        if state.t >= cfg.t_end - eps_t {
            break;
        }

        let mut target = next_sample.min(cfg.t_end);
        if next_snap < snapshot_times.len() {
            target = target.min(snapshot_times[next_snap]);
        }
        let h = dt.min(target - state.t);
        match step(&state, h, params) {
            Ok(next) => {
                state = next;
                rec.steps_accepted += 1;
                rec.sup_linf_u = rec.sup_linf_u.max(state.u.max());
                streak += 1;
                if streak >= 20 && dt < cfg.dt {
                    dt = (2.0 * dt).min(cfg.dt);
                    streak = 0;
                }
            }
            Err(Error::StepRejected { dt_max, .. }) => {
                rec.steps_rejected += 1;
                streak = 0;
                dt = 0.5 * h;
                if dt < 1e-14 * cfg.t_end.max(1.0) {
                    return Err(Error::StepRejected { dt, dt_max });
                }
            }
            Err(Error::Invariant(msg)) => {
                return Err(Error::Verification {
                    t: state.t,
                    message: format!("scheme failure: {msg}"),
                    scheme_suspect: true,
                    trajectory: Box::new(rec),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rec)
}

/// Returns the first failing monitor with a flag telling whether the
/// discretization (rather than the analytical bound) is the suspect.
fn check_monitors(s: &TrajectorySample, gamma: f64, l1_bound: f64, tol: f64) -> Option<(String, bool)> {
    let slack = 1e-12 * gamma.max(1.0);
    if !(s.min_u > 0.0) {
        return Some((format!("scheme failure: min u = {} is not positive", s.min_u), true));
    }
    if s.min_v < -slack || s.max_v > gamma + slack {
        return Some((
            format!(
                "scheme failure: signal range [{}, {}] leaves [0, {gamma}]",
                s.min_v, s.max_v
            ),
            true,
        ));
    }
    if s.l1_u > l1_bound * (1.0 + 1e-6) {
        return Some((
            format!(
                "bound violation: ||u||_1 = {} exceeds max(||u0||_1, |Omega| lambda/mu) = {l1_bound}",
                s.l1_u
            ),
            false,
        ));
    }
    if s.min_u < s.y_sub - tol {
        return Some((
            format!(
                "bound violation: min u = {} below sub-solution y = {} by more than {tol:.3e}",
                s.min_u, s.y_sub
            ),
            false,
        ));
    }
    None
}

/// The constant chain of the L^p bootstrap that bounds `sup_t ‖u(t)‖∞`.
#[derive(Clone, Debug, Serialize)]
pub struct MoserChain {
    pub c_t: f64,
    pub c_gn: f64,
    pub dim: usize,
    pub measure: f64,
    pub gamma_g_sup: f64,
    pub lambda: f64,
    pub mu: f64,
    pub u0_linf: f64,
    pub u0_l1: f64,
    /// C₄ = C_GN max{1, C_GN^{n/2}}
    pub c4_gn: f64,
    pub c1s: f64,
    pub c2s: f64,
    pub c3s: f64,
    pub c4s: f64,
    pub c5s: f64,
}

/// Evaluates c₁* … c₅* from the embedding constants and the data.
#[allow(clippy::too_many_arguments)]
pub fn moser_chain(
    c_t: f64,
    c_gn: f64,
    dim: usize,
    measure: f64,
    gamma_g_sup: f64,
    lambda: f64,
    mu: f64,
    u0_linf: f64,
    u0_l1: f64,
) -> MoserChain {
    let half_n = dim as f64 / 2.0;
    let c1s = c_t.powi(4) * gamma_g_sup * gamma_g_sup / 8.0 + lambda + 2.0;
    let c4_gn = mesh::gn_c4(c_gn, dim);
    let c2s = c4_gn * 1f64.max((c1s / 2.0).powf(half_n)) * c1s;
    let c3s = measure + c2s;
    let c4s = c3s * 2f64.powi(4 * dim as i32);
    let c5s = c4s * u0_linf.max(u0_l1).max(lambda * measure / mu);
    MoserChain {
        c_t,
        c_gn,
        dim,
        measure,
        gamma_g_sup,
        lambda,
        mu,
        u0_linf,
        u0_l1,
        c4_gn,
        c1s,
        c2s,
        c3s,
        c4s,
        c5s,
    }
}

/// Moser chain for a concrete grid and initial datum, using the grid's
/// estimated trace and Gagliardo–Nirenberg constants.
pub fn uniform_bound_constants(params: &ModelParams, u0: &ScalarField) -> Result<MoserChain> {
    let grid = u0.grid();
    Ok(moser_chain(
        grid.trace_constant()?,
        grid.gn_constant()?,
        grid.dim(),
        grid.measure(),
        params.gamma * params.g_sup(grid),
        params.lambda,
        params.mu,
        mesh::lp_norm(u0, f64::INFINITY)?,
        mesh::lp_norm(u0, 1.0)?,
    ))
}

/// Calibrates the monitor coefficient α on a manufactured solution of the
/// `u` equation with prescribed signal on [0,1]:
/// `u = (1 + ½cos πx)(1 + ½ sin t)`, `v = 0.1 cos πx`, both with zero
/// normal derivative. Returns `max err / (h² + dt)` over three refinements.
pub fn calibrate_monitor_alpha(params: &ModelParams) -> Result<f64> {
    use std::f64::consts::PI;
    let (lambda, mu) = (params.lambda, params.mu);
    let ue = |x: f64, t: f64| (1.0 + 0.5 * (PI * x).cos()) * (1.0 + 0.5 * t.sin());
    let src = |x: f64, t: f64| {
        let a = 1.0 + 0.5 * (PI * x).cos();
        let ax = -0.5 * PI * (PI * x).sin();
        let axx = -0.5 * PI * PI * (PI * x).cos();
        let b = 1.0 + 0.5 * t.sin();
        let bt = 0.5 * t.cos();
        let vx = -0.1 * PI * (PI * x).sin();
        let vxx = -0.1 * PI * PI * (PI * x).cos();
        let u = a * b;
        // u_t − u_xx + (u v_x)_x − λu + μu²
        a * bt - axx * b + (ax * vx + a * vxx) * b - lambda * u + mu * u * u
    };
    let mut alpha: f64 = 0.0;
    for (n, dt) in [(51usize, 1e-2f64), (101, 5e-3), (201, 2.5e-3)] {
        let grid = mesh::build_grid(&mesh::DomainSpec::unit_interval(), &[n])?;
        let xs = grid.axis(0).to_vec();
        let v: Vec<f64> = xs.iter().map(|&x| 0.1 * (PI * x).cos()).collect();
        let mut u: Vec<f64> = xs.iter().map(|&x| ue(x, 0.0)).collect();
        let steps = (1.0 / dt).round() as usize;
        let mut err: f64 = 0.0;
        for k in 0..steps {
            let t_new = (k + 1) as f64 * dt;
            // Source sampled at the new time level (implicit-side consistent).
            let s: Vec<f64> = xs.iter().map(|&x| src(x, t_new)).collect();
            u = advance_density(&grid, &u, &v, dt, lambda, mu, Some(&s))?;
            for (ui, &x) in u.iter().zip(&xs) {
                err = err.max((ui - ue(x, t_new)).abs());
            }
        }
        let h = grid.h_max();
        alpha = alpha.max(err / (h * h + dt));
    }
    Ok(alpha)
}
