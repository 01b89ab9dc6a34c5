//! Uniform tensor-product grids on intervals and rectangles.
//!
//! Nodes are numbered lexicographically with the x index fastest:
//! `index = i + nx * j`. Volume weights are trapezoidal, boundary weights are
//! the trapezoidal rule along each edge of the boundary (for an interval the
//! boundary is the two endpoints with unit counting weight).

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Interval,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DomainSpec {
    Interval { lower: f64, upper: f64 },
    Rectangle { lower: [f64; 2], upper: [f64; 2] },
}

impl DomainSpec {
    pub fn unit_interval() -> Self {
        DomainSpec::Interval {
            lower: 0.0,
            upper: 1.0,
        }
    }

    pub fn kind(&self) -> DomainKind {
        match self {
            DomainSpec::Interval { .. } => DomainKind::Interval,
            DomainSpec::Rectangle { .. } => DomainKind::Rectangle,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Interval { .. } => 1,
            DomainSpec::Rectangle { .. } => 2,
        }
    }
}

/// A grid edge between two axis-neighbours `a < b`.
///
/// `face` is the measure of the dual-cell face crossed by the edge (1 in 1D,
/// the trapezoidal weight of the transverse coordinate in 2D), so that
/// `face * (f[b] - f[a])^2 / h` sums to the discrete Dirichlet energy.
#[derive(Clone, Copy, Debug)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
    pub face: f64,
    pub h: f64,
}

#[derive(Debug)]
pub struct Grid {
    kind: DomainKind,
    lower: Vec<f64>,
    upper: Vec<f64>,
    resolution: Vec<usize>,
    spacing: Vec<f64>,
    axes: Vec<Vec<f64>>,
    boundary: Vec<usize>,
    normals: Vec<[f64; 2]>,
    volume_weights: Vec<f64>,
    boundary_weights: Vec<f64>,
    edges: Vec<Edge>,
    trace_constant: OnceLock<f64>,
    gn_constant: OnceLock<f64>,
}

/// Builds a grid; `resolution` holds the node count per axis.
pub fn build_grid(domain: &DomainSpec, resolution: &[usize]) -> Result<Arc<Grid>> {
    let (lower, upper) = match domain {
        DomainSpec::Interval { lower, upper } => (vec![*lower], vec![*upper]),
        DomainSpec::Rectangle { lower, upper } => (lower.to_vec(), upper.to_vec()),
    };
    let dim = lower.len();
    if resolution.len() != dim {
        return Err(Error::config(
            "resolution",
            format!("expected {dim} entries, got {}", resolution.len()),
        ));
    }
    for k in 0..dim {
        if !(lower[k].is_finite() && upper[k].is_finite()) || upper[k] <= lower[k] {
            return Err(Error::config(
                "domain_spec",
                format!("degenerate extent on axis {k}: [{}, {}]", lower[k], upper[k]),
            ));
        }
        if resolution[k] < 3 {
            return Err(Error::config(
                "resolution",
                format!("axis {k} has {} nodes, need at least 3", resolution[k]),
            ));
        }
    }

    let spacing: Vec<f64> = (0..dim)
        .map(|k| (upper[k] - lower[k]) / (resolution[k] - 1) as f64)
        .collect();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|k| {
            let n = resolution[k];
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        upper[k]
                    } else {
                        lower[k] + i as f64 * spacing[k]
                    }
                })
                .collect()
        })
        .collect();
    let trap = |k: usize, i: usize| -> f64 {
        if i == 0 || i == resolution[k] - 1 {
            0.5 * spacing[k]
        } else {
            spacing[k]
        }
    };

    let mut boundary = Vec::new();
    let mut normals = Vec::new();
    let mut edges = Vec::new();
    let (volume_weights, boundary_weights) = match dim {
        1 => {
            let n = resolution[0];
            let vw: Vec<f64> = (0..n).map(|i| trap(0, i)).collect();
            let mut bw = vec![0.0; n];
            bw[0] = 1.0;
            bw[n - 1] = 1.0;
            boundary.extend([0, n - 1]);
            normals.extend([[-1.0, 0.0], [1.0, 0.0]]);
            for i in 0..n - 1 {
                edges.push(Edge {
                    a: i,
                    b: i + 1,
                    axis: 0,
                    face: 1.0,
                    h: spacing[0],
                });
            }
            (vw, bw)
        }
        _ => {
            let (nx, ny) = (resolution[0], resolution[1]);
            let mut vw = vec![0.0; nx * ny];
            let mut bw = vec![0.0; nx * ny];
            for j in 0..ny {
                for i in 0..nx {
                    let id = i + nx * j;
                    vw[id] = trap(0, i) * trap(1, j);
                    let on_x = i == 0 || i == nx - 1;
                    let on_y = j == 0 || j == ny - 1;
                    if on_x || on_y {
                        let mut nrm = [0.0f64, 0.0];
                        let mut w = 0.0;
                        if on_x {
                            nrm[0] = if i == 0 { -1.0 } else { 1.0 };
                            w += trap(1, j);
                        }
                        if on_y {
                            nrm[1] = if j == 0 { -1.0 } else { 1.0 };
                            w += trap(0, i);
                        }
                        let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1]).sqrt();
                        boundary.push(id);
                        normals.push([nrm[0] / len, nrm[1] / len]);
                        bw[id] = w;
                    }
                    if i + 1 < nx {
                        edges.push(Edge {
                            a: id,
                            b: id + 1,
                            axis: 0,
                            face: trap(1, j),
                            h: spacing[0],
                        });
                    }
                    if j + 1 < ny {
                        edges.push(Edge {
                            a: id,
                            b: id + nx,
                            axis: 1,
                            face: trap(0, i),
                            h: spacing[1],
                        });
                    }
                }
            }
            (vw, bw)
        }
    };

    Ok(Arc::new(Grid {
        kind: domain.kind(),
        lower,
        upper,
        resolution: resolution.to_vec(),
        spacing,
        axes,
        boundary,
        normals,
        volume_weights,
        boundary_weights,
        edges,
        trace_constant: OnceLock::new(),
        gn_constant: OnceLock::new(),
    }))
}

impl Grid {
    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Smallest spacing over all axes.
    pub fn h_min(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn h_max(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    /// Coordinates of node `id` (the second entry is 0 on intervals).
    pub fn coord(&self, id: usize) -> [f64; 2] {
        match self.dim() {
            1 => [self.axes[0][id], 0.0],
            _ => {
                let nx = self.resolution[0];
                [self.axes[0][id % nx], self.axes[1][id / nx]]
            }
        }
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    /// Unit outward normals, parallel to [`Grid::boundary_nodes`].
    pub fn normals(&self) -> &[[f64; 2]] {
        &self.normals
    }

    pub fn is_boundary(&self, id: usize) -> bool {
        self.boundary_weights[id] > 0.0
    }

    pub fn volume_weights(&self) -> &[f64] {
        &self.volume_weights
    }

    /// Boundary quadrature weights over all nodes (zero at interior nodes).
    pub fn boundary_weights(&self) -> &[f64] {
        &self.boundary_weights
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// |Ω|
    pub fn measure(&self) -> f64 {
        (0..self.dim()).map(|k| self.upper[k] - self.lower[k]).product()
    }

    /// |∂Ω|
    pub fn boundary_measure(&self) -> f64 {
        match self.dim() {
            1 => 2.0,
            _ => 2.0 * ((self.upper[0] - self.lower[0]) + (self.upper[1] - self.lower[1])),
        }
    }

    /// Arc-length position of a boundary node, measured counter-clockwise from
    /// the lower-left corner (0 or 1 on intervals, the endpoint index).
    pub fn arclength(&self, id: usize) -> f64 {
        let [x, y] = self.coord(id);
        match self.dim() {
            1 => {
                if id == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            _ => {
                let (x0, y0) = (self.lower[0], self.lower[1]);
                let (lx, ly) = (self.upper[0] - x0, self.upper[1] - y0);
                let (dx, dy) = (x - x0, y - y0);
                if dy <= 0.0 {
                    dx
                } else if (dx - lx).abs() <= 1e-14 * lx {
                    lx + dy
                } else if (dy - ly).abs() <= 1e-14 * ly {
                    lx + ly + (lx - dx)
                } else {
                    2.0 * lx + ly + (ly - dy)
                }
            }
        }
    }

    /// Discrete trace constant of this grid, estimated on first use.
    pub fn trace_constant(&self) -> Result<f64> {
        if let Some(c) = self.trace_constant.get() {
            return Ok(*c);
        }
        let c = estimate_trace_constant(self)?.value;
        Ok(*self.trace_constant.get_or_init(|| c))
    }

    /// Discrete Gagliardo–Nirenberg constant of this grid, estimated on first use.
    pub fn gn_constant(&self) -> Result<f64> {
        if let Some(c) = self.gn_constant.get() {
            return Ok(*c);
        }
        let c = estimate_gn_constant(self)?.value;
        Ok(*self.gn_constant.get_or_init(|| c))
    }
}

/// Nodal values of a function on a [`Grid`].
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Domain(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at node {i}",
                values[i]
            )));
        }
        Ok(ScalarField {
            grid: Arc::clone(grid),
            values,
        })
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        ScalarField {
            grid: Arc::clone(grid),
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.coord(i))).collect();
        ScalarField {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        debug_assert_eq!(self.values.len(), other.values.len());
        ScalarField {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        integrate(self) / self.grid.measure()
    }

    /// Nodewise sup-distance to another field on the same grid.
    pub fn dist_inf(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn integrate(field: &ScalarField) -> f64 {
    dot(field.values(), field.grid.volume_weights())
}

pub fn boundary_integrate(field: &ScalarField) -> f64 {
    dot(field.values(), field.grid.boundary_weights())
}

/// ‖f‖_{L^p(Ω)} for `p ∈ [1, ∞]` (pass `f64::INFINITY` for the sup norm).
pub fn lp_norm(field: &ScalarField, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Domain(format!("L^p norm needs p >= 1, got {p}")));
    }
    if p.is_infinite() {
        return Ok(field.values.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let w = field.grid.volume_weights();
    let s: f64 = if p == 1.0 {
        field.values.iter().zip(w).map(|(v, w)| w * v.abs()).sum()
    } else if p == 2.0 {
        field.values.iter().zip(w).map(|(v, w)| w * v * v).sum()
    } else {
        field
            .values
            .iter()
            .zip(w)
            .map(|(v, w)| w * v.abs().powf(p))
            .sum()
    };
    Ok(s.powf(1.0 / p))
}

/// ‖f‖²_{L²(∂Ω)}
pub fn boundary_l2_sq(values: &[f64], grid: &Grid) -> f64 {
    values
        .iter()
        .zip(grid.boundary_weights())
        .map(|(v, w)| w * v * v)
        .sum()
}

/// ‖f‖²_{L²(Ω)}
pub fn l2_sq(values: &[f64], grid: &Grid) -> f64 {
    values
        .iter()
        .zip(grid.volume_weights())
        .map(|(v, w)| w * v * v)
        .sum()
}

/// Discrete ‖∇f‖²_{L²(Ω)}: edge difference quotients (centred at edge
/// midpoints) weighted by the dual-cell face measure.
pub fn grad_sq_norm(values: &[f64], grid: &Grid) -> f64 {
    grid.edges()
        .iter()
        .map(|e| {
            let d = values[e.b] - values[e.a];
            e.face * d * d / e.h
        })
        .sum()
}

/// Discrete H¹ norm, (‖f‖² + ‖∇f‖²)^{1/2}.
pub fn h1_norm(values: &[f64], grid: &Grid) -> f64 {
    (l2_sq(values, grid) + grad_sq_norm(values, grid)).sqrt()
}

/// L² norm of the second differences along each axis, taken at nodes that
/// are interior in that direction.
pub fn second_difference_norm(values: &[f64], grid: &Grid) -> f64 {
    let res = grid.resolution();
    let nx = res[0];
    let ny = if res.len() > 1 { res[1] } else { 1 };
    let vw = grid.volume_weights();
    let mut acc = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let id = i + nx * j;
            if i > 0 && i + 1 < nx {
                let h = grid.spacing()[0];
                let d = (values[id + 1] - 2.0 * values[id] + values[id - 1]) / (h * h);
                acc += vw[id] * d * d;
            }
            if ny > 1 && j > 0 && j + 1 < ny {
                let h = grid.spacing()[1];
                let d = (values[id + nx] - 2.0 * values[id] + values[id - nx]) / (h * h);
                acc += vw[id] * d * d;
            }
        }
    }
    acc.sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEstimate {
    pub value: f64,
    /// Maximizing Young parameter of the reformulated eigenproblem.
    pub t_opt: f64,
    pub evaluations: usize,
}

/// Largest generalized eigenvalue of (B, αM + βK), where B is the boundary
/// mass. Because B is supported on boundary nodes only, the pencil reduces to
/// the dense symmetric matrix `B½ (D⁻¹)_bb B½`.
fn boundary_pencil_max(grid: &Grid, alpha: f64, beta: f64) -> Result<f64> {
    let n = grid.len();
    let op = linops::assemble_general(
        grid,
        &vec![beta; n],
        &vec![alpha; n],
        &vec![0.0; n],
    )?;
    let bnodes = grid.boundary_nodes();
    let nb = bnodes.len();
    let sqrt_b: Vec<f64> = bnodes
        .iter()
        .map(|&i| grid.boundary_weights()[i].sqrt())
        .collect();
    let mut s = DMatrix::<f64>::zeros(nb, nb);
    let mut rhs = vec![0.0; n];
    for (col, &bi) in bnodes.iter().enumerate() {
        rhs.iter_mut().for_each(|r| *r = 0.0);
        rhs[bi] = 1.0;
        let x = linops::solve_linear(&op, &rhs, 1e-13)?;
        for (row, &bj) in bnodes.iter().enumerate() {
            s[(row, col)] = sqrt_b[row] * x[bj] * sqrt_b[col];
        }
    }
    let sym = (&s + s.transpose()) * 0.5;
    let eig = sym.try_symmetric_eigen(1e-14, 10_000).ok_or(Error::NonConvergence {
        method: "symmetric eigen-iteration".into(),
        iterations: 10_000,
        residual: f64::NAN,
    })?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest C_T with ‖f‖²_{L²(∂Ω)} ≤ C_T² ‖f‖_{L²} ‖f‖_{H¹} over all grid functions.
///
/// Uses √(ab) = min_t (ta + b/t)/2 to write the sup of the Rayleigh quotient as
/// `sup_t 2 λ_max(B, (t + 1/t) M + K/t)`, and maximizes over `log t` by a
/// coarse scan followed by golden-section refinement.
pub fn estimate_trace_constant(grid: &Grid) -> Result<TraceEstimate> {
    let q = |log_t: f64| -> Result<f64> {
        let t = log_t.exp();
        Ok(2.0 * boundary_pencil_max(grid, t + 1.0 / t, 1.0 / t)?)
    };
    let (lo, hi, m) = (-8.0_f64, 8.0_f64, 33usize);
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut evals = 0;
    let mut samples = Vec::with_capacity(m);
    for k in 0..m {
        let s = lo + (hi - lo) * k as f64 / (m - 1) as f64;
        let v = q(s)?;
        evals += 1;
        samples.push((s, v));
        if v > best.0 {
            best = (v, k);
        }
    }
    let k = best.1;
    let mut a = samples[k.saturating_sub(1)].0;
    let mut b = samples[(k + 1).min(m - 1)].0;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = q(c)?;
    let mut fd = q(d)?;
    evals += 2;
    let mut it = 0;
    while (b - a) > 1e-9 && it < 200 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = q(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = q(d)?;
        }
        evals += 1;
        it += 1;
    }
    let (log_t, v) = if fc > fd { (c, fc) } else { (d, fd) };
    let v = v.max(best.0);
    let value = v.sqrt().max(1e-12);
    if !value.is_finite() {
        return Err(Error::NonConvergence {
            method: "trace-constant maximization".into(),
            iterations: it,
            residual: v,
        });
    }
    Ok(TraceEstimate {
        value,
        t_opt: log_t.exp(),
        evaluations: evals,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GnEstimate {
    pub value: f64,
    pub theta: f64,
    pub ascent_iterations: usize,
}

/// Gagliardo–Nirenberg ratio ‖f‖² / (‖∇f‖^{2θ} ‖f‖₁^{2(1−θ)} + ‖f‖₁²) for f ≥ 0.
pub fn gn_ratio(values: &[f64], grid: &Grid) -> f64 {
    let theta = gn_theta(grid.dim());
    let n2 = l2_sq(values, grid);
    let k = grad_sq_norm(values, grid);
    let l1: f64 = values
        .iter()
        .zip(grid.volume_weights())
        .map(|(v, w)| w * v.abs())
        .sum();
    n2 / (k.powf(theta) * l1.powf(2.0 * (1.0 - theta)) + l1 * l1)
}

/// θ = n/(n+2)
pub fn gn_theta(dim: usize) -> f64 {
    dim as f64 / (dim as f64 + 2.0)
}

/// Numerical estimate of the discrete Gagliardo–Nirenberg constant over
/// nonnegative grid functions.
///
/// There is no eigenproblem behind this one (the L¹ norm is not quadratic),
/// so the estimate is a lower bound on the discrete supremum: a scan over
/// Gaussian bumps anchored at every node and a range of widths, polished by
/// projected gradient ascent on the nonnegative cone.
pub fn estimate_gn_constant(grid: &Grid) -> Result<GnEstimate> {
    let n = grid.len();
    let theta = gn_theta(grid.dim());
    let diam = (0..grid.dim())
        .map(|k| (grid.upper[k] - grid.lower[k]).powi(2))
        .sum::<f64>()
        .sqrt();
    let h = grid.h_min();

    let mut best_val = gn_ratio(&vec![1.0; n], grid);
    let mut best = vec![1.0; n];

    // Candidate centres: every node on 1D grids, a thinned lattice in 2D.
    let stride = if grid.dim() == 1 {
        1
    } else {
        (grid.resolution[0] / 10).max(1)
    };
    let centres: Vec<usize> = (0..n)
        .filter(|&id| {
            if grid.dim() == 1 {
                return true;
            }
            let nx = grid.resolution[0];
            let (i, j) = (id % nx, id / nx);
            (i % stride == 0 || i == nx - 1) && (j % stride == 0 || j == grid.resolution[1] - 1)
        })
        .collect();
    let mut widths = Vec::new();
    let mut w = 0.5 * h;
    while w < 2.0 * diam {
        widths.push(w);
        w *= 1.25;
    }
    let mut f = vec![0.0; n];
    for &c in &centres {
        let xc = grid.coord(c);
        for &s in &widths {
            for (id, fi) in f.iter_mut().enumerate() {
                let x = grid.coord(id);
                let r2 = (x[0] - xc[0]).powi(2) + (x[1] - xc[1]).powi(2);
                *fi = (-r2 / (2.0 * s * s)).exp();
            }
            let r = gn_ratio(&f, grid);
            if r > best_val {
                best_val = r;
                best.copy_from_slice(&f);
            }
        }
    }

    // Projected gradient ascent from the best bump.
    let wts = grid.volume_weights();
    let mut iters = 0;
    let mut step = 1.0;
    let normalize = |f: &mut [f64]| {
        let l1 = dot(f, wts);
        f.iter_mut().for_each(|v| *v /= l1);
    };
    normalize(&mut best);
    let mut grad = vec![0.0; n];
    let mut trial = vec![0.0; n];
    for _ in 0..300 {
        let n2 = l2_sq(&best, grid);
        let k = grad_sq_norm(&best, grid);
        if k <= 0.0 {
            break;
        }
        let l = dot(&best, wts);
        let denom = k.powf(theta) * l.powf(2.0 - 2.0 * theta) + l * l;
        let r = n2 / denom;
        // d‖∇f‖² = 2 K f
        let mut dk = vec![0.0; n];
        for e in grid.edges() {
            let g = 2.0 * e.face * (best[e.b] - best[e.a]) / e.h;
            dk[e.b] += g;
            dk[e.a] -= g;
        }
        let dk_coef = theta * k.powf(theta - 1.0) * l.powf(2.0 - 2.0 * theta);
        let dl_coef = (2.0 - 2.0 * theta) * k.powf(theta) * l.powf(1.0 - 2.0 * theta) + 2.0 * l;
        for i in 0..n {
            let dn = 2.0 * wts[i] * best[i];
            let dd = dk_coef * dk[i] + dl_coef * wts[i];
            // Divide by the weight: ascent in the L²(Ω) metric.
            grad[i] = (dn - r * dd) / denom / wts[i];
        }
        let gnorm = l2_sq(&grad, grid).sqrt();
        if gnorm < 1e-12 {
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            for i in 0..n {
                trial[i] = (best[i] + step * grad[i]).max(0.0);
            }
            if dot(&trial, wts) <= 0.0 {
                step *= 0.5;
                continue;
            }
            normalize(&mut trial);
            let rt = gn_ratio(&trial, grid);
            if rt > r {
                best.copy_from_slice(&trial);
                best_val = best_val.max(rt);
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        iters += 1;
        if !accepted {
            break;
        }
    }
    if !best_val.is_finite() || best_val <= 0.0 {
        return Err(Error::NonConvergence {
            method: "Gagliardo-Nirenberg constant search".into(),
            iterations: iters,
            residual: best_val,
        });
    }
    Ok(GnEstimate {
        value: best_val,
        theta,
        ascent_iterations: iters,
    })
}

/// c₁(ε) = C_T⁴/(4ε) + ε, the trace-inequality constant.
pub fn trace_c1(c_t: f64, eps: f64) -> f64 {
    c_t.powi(4) / (4.0 * eps) + eps
}

/// C₄ = C_GN · max{1, C_GN^{n/2}}
pub fn gn_c4(c_gn: f64, dim: usize) -> f64 {
    c_gn * 1f64.max(c_gn.powf(dim as f64 / 2.0))
}

/// c₁′(ε) = C₄ (1 + ε^{−n/2})
pub fn gn_c1_prime(c_gn: f64, dim: usize, eps: f64) -> f64 {
    gn_c4(c_gn, dim) * (1.0 + eps.powf(-(dim as f64) / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Arc<Grid> {
        build_grid(&DomainSpec::unit_interval(), &[n]).unwrap()
    }

    #[test]
    fn interval_grid_layout() {
        let g = unit(101);
        assert_eq!(g.len(), 101);
        assert!((g.spacing()[0] - 0.01).abs() < 1e-15);
        assert_eq!(g.boundary_nodes(), &[0, 100]);
        assert_eq!(g.normals(), &[[-1.0, 0.0], [1.0, 0.0]]);
        assert!((g.volume_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g.boundary_weights().iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rectangle_grid_layout() {
        let d = DomainSpec::Rectangle {
            lower: [0.0, 0.0],
            upper: [1.0, 2.0],
        };
        let g = build_grid(&d, &[11, 21]).unwrap();
        assert_eq!(g.len(), 231);
        let vol: f64 = g.volume_weights().iter().sum();
        assert!((vol - 2.0).abs() < 1e-12 * 2.0);
        let per: f64 = g.boundary_weights().iter().sum();
        assert!((per - 6.0).abs() < 1e-12 * 6.0);
        assert_eq!(g.boundary_nodes().len(), 2 * 11 + 2 * 19);
        for n in g.normals() {
            assert!(((n[0] * n[0] + n[1] * n[1]).sqrt() - 1.0).abs() < 1e-15);
        }
        for id in 0..g.len() {
            let [x, y] = g.coord(id);
            let on = x == 0.0 || x == 1.0 || y == 0.0 || y == 2.0;
            assert_eq!(on, g.is_boundary(id));
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let e = build_grid(&DomainSpec::unit_interval(), &[2]).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "resolution"));
        let e = build_grid(
            &DomainSpec::Interval {
                lower: 1.0,
                upper: 1.0,
            },
            &[10],
        )
        .unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "domain_spec"));
    }

    #[test]
    fn constant_and_linear_quadrature() {
        let g = unit(101);
        let one = ScalarField::constant(&g, 1.0);
        assert!((integrate(&one) - 1.0).abs() < 1e-14);
        assert!((boundary_integrate(&one) - 2.0).abs() < 1e-14);
        let x = ScalarField::from_fn(&g, |p| p[0]);
        assert!((integrate(&x) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn affine_exact_on_rectangle() {
        let d = DomainSpec::Rectangle {
            lower: [-1.0, 0.5],
            upper: [2.0, 1.5],
        };
        let g = build_grid(&d, &[7, 13]).unwrap();
        let f = ScalarField::from_fn(&g, |p| 3.0 * p[0] - 2.0 * p[1] + 0.25);
        // ∫ over [-1,2]×[0.5,1.5]: 3·(1.5)·1 − 2·1·3 + 0.25·3
        let exact = 3.0 * 1.5 - 2.0 * 3.0 + 0.75;
        assert!((integrate(&f) - exact).abs() < 1e-13);
    }

    #[test]
    fn l2_of_square_converges_second_order() {
        let err = |n: usize| {
            let g = unit(n);
            let f = ScalarField::from_fn(&g, |p| p[0] * p[0]);
            (lp_norm(&f, 2.0).unwrap().powi(2) - 0.2).abs()
        };
        let (e1, e2) = (err(51), err(101));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn lp_norm_rejects_small_p() {
        let g = unit(5);
        let f = ScalarField::constant(&g, 1.0);
        assert!(matches!(lp_norm(&f, 0.5), Err(Error::Domain(_))));
        assert_eq!(lp_norm(&f.map(|_| -3.0), f64::INFINITY).unwrap(), 3.0);
    }

    #[test]
    fn field_rejects_bad_values() {
        let g = unit(5);
        assert!(ScalarField::new(&g, vec![0.0; 4]).is_err());
        assert!(ScalarField::new(&g, vec![0.0, 1.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn trace_constant_dominates_constant_function() {
        let g = unit(51);
        let c = g.trace_constant().unwrap();
        assert!(c >= 2f64.sqrt() - 1e-12, "C_T = {c}");
        assert!(c.is_finite());
    }

    #[test]
    fn trace_constant_refinement_consistent() {
        let a = estimate_trace_constant(&unit(201)).unwrap().value;
        let b = estimate_trace_constant(&unit(401)).unwrap().value;
        assert!((a - b).abs() / b < 0.02, "{a} vs {b}");
    }

    #[test]
    fn rectangle_trace_constant_dominates_1d_factor() {
        let d = DomainSpec::Rectangle {
            lower: [0.0, 0.0],
            upper: [1.0, 1.0],
        };
        let g2 = build_grid(&d, &[15, 15]).unwrap();
        let g1 = unit(15);
        let c2 = estimate_trace_constant(&g2).unwrap().value;
        let c1 = estimate_trace_constant(&g1).unwrap().value;
        // Lower bound by tensor test functions f(x)·1(y): compute directly.
        let f1: Vec<f64> = (0..15).map(|i| (-(i as f64) / 3.0).exp()).collect();
        let tensor: Vec<f64> = (0..g2.len()).map(|id| f1[id % 15]).collect();
        let q = boundary_l2_sq(&tensor, &g2) / (l2_sq(&tensor, &g2).sqrt() * h1_norm(&tensor, &g2));
        assert!(c2 * c2 >= q - 1e-12);
        assert!(c2 >= c1 - 1e-9, "2D {c2} < 1D {c1}");
    }

    #[test]
    fn gn_constant_positive() {
        let g = unit(41);
        let e = estimate_gn_constant(&g).unwrap();
        assert!(e.value >= 1.0 - 1e-12, "constants give ratio 1: {}", e.value);
    }

    #[test]
    fn trace_c1_formula() {
        assert!((trace_c1(1.0, 0.5) - 1.0).abs() < 1e-15);
        assert!((trace_c1(2f64.sqrt(), 0.5) - 2.5).abs() < 1e-14);
        assert!((gn_c1_prime(2.0, 1, 0.25) - 2.0 * 2f64.sqrt() * 3.0).abs() < 1e-12);
    }
}
