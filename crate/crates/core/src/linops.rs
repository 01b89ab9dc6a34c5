//! Sparse elliptic operators on structured grids and their linear solvers.
//!
//! Operators are assembled in integrated (finite-volume) form: row `i` is the
//! balance over the dual cell of node `i`,
//!
//! ```text
//! Σ_edges face·a_face·(u_i − u_j)/h + |cell_i|·c_i·u_i + |∂cell_i|·g_i·u_i
//! ```
//!
//! which is the ghost-node elimination of the flux condition
//! `a ∂_ν u + g u = r` multiplied through by the cell measure. With `c ≥ 0`
//! and `g ≥ 0` the matrix is a symmetric M-matrix.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    Robin,
    Neumann,
    Flux,
}

/// Square sparse matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    tag: BoundaryTag,
}

impl SparseOperator {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>, tag: BoundaryTag) -> Self {
        trip.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseOperator {
            n,
            row_ptr,
            cols,
            vals,
            tag,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect(), BoundaryTag::Flux)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn tag(&self) -> BoundaryTag {
        self.tag
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.apply_into(x, &mut y);
        y
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// Adds `d[i]` to every diagonal entry (the diagonal must be structurally present).
    pub fn add_diag(&mut self, d: &[f64]) {
        for (i, di) in d.iter().enumerate().take(self.n) {
            let k = (self.row_ptr[i]..self.row_ptr[i + 1])
                .find(|&k| self.cols[k] == i)
                .expect("diagonal entry missing");
            self.vals[k] += di;
        }
    }

    pub fn scale_rows(&mut self, s: &[f64]) {
        for (i, si) in s.iter().enumerate().take(self.n) {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                self.vals[k] *= si;
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Off-diagonals nonpositive and every row weakly diagonally dominant.
    pub fn has_m_matrix_signs(&self) -> bool {
        (0..self.n).all(|i| {
            let mut diag = 0.0;
            let mut off = 0.0;
            for (j, v) in self.row(i) {
                if j == i {
                    diag = v;
                } else if v > 0.0 {
                    return false;
                } else {
                    off -= v;
                }
            }
            diag >= off * (1.0 - 1e-14)
        })
    }
}

/// Integrated form of `−∇·(a∇u) + c u` with flux closure `a∂_ν u + g u`.
///
/// No sign checks; see [`assemble_robin_elliptic`] for the checked version.
pub fn assemble_general(grid: &Grid, a: &[f64], c: &[f64], g: &[f64]) -> Result<SparseOperator> {
    let n = grid.len();
    if a.len() != n || c.len() != n || g.len() != n {
        return Err(Error::Assembly(format!(
            "coefficient length mismatch (grid has {n} nodes)"
        )));
    }
    let vw = grid.volume_weights();
    let bw = grid.boundary_weights();
    let mut trip = Vec::with_capacity(n + 4 * grid.edges().len());
    for i in 0..n {
        trip.push((i, i, vw[i] * c[i] + bw[i] * g[i]));
    }
    for e in grid.edges() {
        let k = e.face * 0.5 * (a[e.a] + a[e.b]) / e.h;
        trip.push((e.a, e.a, k));
        trip.push((e.b, e.b, k));
        trip.push((e.a, e.b, -k));
        trip.push((e.b, e.a, -k));
    }
    let tag = if grid
        .boundary_nodes()
        .iter()
        .any(|&i| g[i] != 0.0)
    {
        BoundaryTag::Robin
    } else {
        BoundaryTag::Neumann
    };
    Ok(SparseOperator::from_triplets(n, trip, tag))
}

/// Operator of `−∇·(a∇V) + cV` with Robin closure `a∂_ν V + gV = r`.
pub fn assemble_robin_elliptic(
    grid: &Grid,
    a: &[f64],
    c: &[f64],
    g: &[f64],
) -> Result<SparseOperator> {
    if let Some(i) = a.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Assembly(format!(
            "diffusivity must be positive, got {} at node {i}",
            a[i]
        )));
    }
    if let Some(i) = c.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::Assembly(format!(
            "reaction coefficient must be nonnegative, got {} at node {i}",
            c[i]
        )));
    }
    if let Some(&i) = grid.boundary_nodes().iter().find(|&&i| !(g[i] > 0.0)) {
        return Err(Error::Assembly(format!(
            "boundary coefficient must be positive, got {} at node {i}",
            g[i]
        )));
    }
    assemble_general(grid, a, c, g)
}

/// Operator of `−∇·(a∇W) + cW` with homogeneous Neumann closure.
pub fn assemble_neumann(grid: &Grid, a: &[f64], c: &[f64]) -> Result<SparseOperator> {
    if let Some(i) = a.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Assembly(format!(
            "diffusivity must be positive, got {} at node {i}",
            a[i]
        )));
    }
    assemble_general(grid, a, c, &vec![0.0; grid.len()])
}

/// Right-hand side `|cell|·f + |∂cell|·r` matching the integrated operators.
pub fn integrated_rhs(grid: &Grid, source: &[f64], boundary_data: &[f64]) -> Vec<f64> {
    grid.volume_weights()
        .iter()
        .zip(grid.boundary_weights())
        .zip(source.iter().zip(boundary_data))
        .map(|((vw, bw), (f, r))| vw * f + bw * r)
        .collect()
}

pub const DEFAULT_LINEAR_TOL: f64 = 1e-10;

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn residual(op: &SparseOperator, x: &[f64], rhs: &[f64]) -> Vec<f64> {
    let mut r = op.apply(x);
    r.iter_mut().zip(rhs).for_each(|(ri, bi)| *ri = bi - *ri);
    r
}

/// Solves `op · x = rhs` to `‖op x − rhs‖₂ ≤ tol · max(1, ‖rhs‖₂)`.
///
/// Tridiagonal operators (1D grids) use a banded LU factorization; wider
/// operators use Jacobi-preconditioned BiCGSTAB. A singular but consistent
/// system (pure Neumann with compatible data) returns one of its solutions.
pub fn solve_linear(op: &SparseOperator, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
    if rhs.len() != op.dim() {
        return Err(Error::Domain(format!(
            "rhs has length {}, operator is {}x{}",
            rhs.len(),
            op.dim(),
            op.dim()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let target = tol * norm2(rhs).max(1.0);
    if op.bandwidth() <= 2 {
        let mut x = banded_lu_solve(op, rhs)?;
        let mut r = residual(op, &x, rhs);
        let mut res = norm2(&r);
        // One sweep of iterative refinement tightens badly scaled rows.
        if res > target && res.is_finite() {
            if let Ok(dx) = banded_lu_solve(op, &r) {
                x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
                r = residual(op, &x, rhs);
                res = norm2(&r);
            }
        }
        if !(res <= target.max(rounding_floor(op, &x, rhs))) {
            return Err(Error::NonConvergence {
                method: "banded LU".into(),
                iterations: 1,
                residual: res,
            });
        }
        Ok(x)
    } else {
        bicgstab(op, rhs, target, 20 * op.dim().max(50))
    }
}

/// LU without pivoting on the band. A vanishing final pivot (singular,
/// conservative operator) pins that unknown to zero so consistent systems
/// still produce a solution; the caller's residual check rejects the rest.
fn banded_lu_solve(op: &SparseOperator, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = op.dim();
    let p = op.bandwidth();
    let w = 2 * p + 1;
    let mut band = vec![0.0; n * w];
    let idx = |i: usize, j: usize| i * w + (j + p - i);
    let mut scale = vec![0.0f64; n];
    for i in 0..n {
        for (j, v) in op.row(i) {
            band[idx(i, j)] = v;
            scale[i] = scale[i].max(v.abs());
        }
    }
    let mut b = rhs.to_vec();
    let mut singular_last = false;
    for k in 0..n {
        let piv = band[idx(k, k)];
        if piv.abs() <= 1e-12 * scale[k].max(f64::MIN_POSITIVE) {
            if k == n - 1 {
                singular_last = true;
                break;
            }
            return Err(Error::NonConvergence {
                method: "banded LU (zero pivot)".into(),
                iterations: k,
                residual: piv.abs(),
            });
        }
        for i in (k + 1)..(k + p + 1).min(n) {
            let l = band[idx(i, k)] / piv;
            if l == 0.0 {
                continue;
            }
            band[idx(i, k)] = l;
            for j in (k + 1)..(k + p + 1).min(n) {
                band[idx(i, j)] -= l * band[idx(k, j)];
            }
            b[i] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        if i == n - 1 && singular_last {
            x[i] = 0.0;
            continue;
        }
        let mut s = b[i];
        for j in (i + 1)..(i + p + 1).min(n) {
            s -= band[idx(i, j)] * x[j];
        }
        x[i] = s / band[idx(i, i)];
    }
    Ok(x)
}

/// Residual norm reachable in floating point for iterate `x`.
fn rounding_floor(op: &SparseOperator, x: &[f64], rhs: &[f64]) -> f64 {
    let a_inf = (0..op.dim())
        .map(|i| op.row(i).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    100.0 * f64::EPSILON * (a_inf * norm2(x) + norm2(rhs))
}

fn bicgstab(op: &SparseOperator, rhs: &[f64], target: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = op.dim();
    let inv_d: Vec<f64> = op
        .diag()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_d).map(|(a, b)| a * b).collect() };
    let dotp = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut res = norm2(&r);
    if res <= target {
        return Ok(x);
    }
    let mut t = vec![0.0; n];
    let mut restarts = 0usize;
    // Recomputes the true residual and restarts the recurrence from it;
    // returns true when the current iterate is already acceptable.
    #[allow(clippy::too_many_arguments)]
    let mut restart = |r: &mut Vec<f64>,
                       r_hat: &mut Vec<f64>,
                       p: &mut Vec<f64>,
                       v: &mut Vec<f64>,
                       rho: &mut f64,
                       alpha: &mut f64,
                       omega: &mut f64,
                       x: &[f64],
                       res: &mut f64|
     -> Result<bool> {
        *r = residual(op, x, rhs);
        *res = norm2(r);
        if *res <= target.max(rounding_floor(op, x, rhs)) {
            return Ok(true);
        }
        restarts += 1;
        if restarts > 10 {
            return Err(Error::NonConvergence {
                method: "BiCGSTAB (breakdown)".into(),
                iterations: restarts,
                residual: *res,
            });
        }
        r_hat.clone_from(r);
        p.iter_mut().for_each(|z| *z = 0.0);
        v.iter_mut().for_each(|z| *z = 0.0);
        *rho = 1.0;
        *alpha = 1.0;
        *omega = 1.0;
        Ok(false)
    };
    for _ in 0..max_iter {
        let rho_new = dotp(&r_hat, &r);
        if rho_new.abs() < 1e-300 * norm2(&r_hat).max(1.0) * res.max(f64::MIN_POSITIVE) {
            if restart(&mut r, &mut r_hat, &mut p, &mut v, &mut rho, &mut alpha, &mut omega, &x, &mut res)? {
                return Ok(x);
            }
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        op.apply_into(&p_hat, &mut v);
        let denom = dotp(&r_hat, &v);
        if denom.abs() < 1e-300 {
            if restart(&mut r, &mut r_hat, &mut p, &mut v, &mut rho, &mut alpha, &mut omega, &x, &mut res)? {
                return Ok(x);
            }
            continue;
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm2(&s) <= target {
            x.iter_mut().zip(&p_hat).for_each(|(xi, pi)| *xi += alpha * pi);
            let true_res = norm2(&residual(op, &x, rhs));
            if true_res <= target.max(rounding_floor(op, &x, rhs)) {
                return Ok(x);
            }
            r = residual(op, &x, rhs);
            res = true_res;
            continue;
        }
        let s_hat = precond(&s);
        op.apply_into(&s_hat, &mut t);
        let tt = dotp(&t, &t);
        omega = if tt > 0.0 { dotp(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r);
        if res <= target {
            let true_res = norm2(&residual(op, &x, rhs));
            if true_res <= target.max(rounding_floor(op, &x, rhs)) {
                return Ok(x);
            }
            r = residual(op, &x, rhs);
            res = true_res;
        }
        if omega == 0.0
            && restart(&mut r, &mut r_hat, &mut p, &mut v, &mut rho, &mut alpha, &mut omega, &x, &mut res)?
        {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence {
        method: "BiCGSTAB".into(),
        iterations: max_iter,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid, DomainSpec};
    use std::f64::consts::PI;

    fn unit(n: usize) -> std::sync::Arc<Grid> {
        build_grid(&DomainSpec::unit_interval(), &[n]).unwrap()
    }

    fn square(n: usize) -> std::sync::Arc<Grid> {
        build_grid(
            &DomainSpec::Rectangle {
                lower: [0.0, 0.0],
                upper: [1.0, 1.0],
            },
            &[n, n],
        )
        .unwrap()
    }

    #[test]
    fn constants_map_to_boundary_flux() {
        let g = unit(21);
        let n = g.len();
        let op = assemble_robin_elliptic(&g, &vec![1.0; n], &vec![0.0; n], &vec![1.0; n]).unwrap();
        let k = 2.5;
        let r = op.apply(&vec![k; n]);
        for (i, ri) in r.iter().enumerate() {
            let expect = if g.is_boundary(i) { k * 1.0 } else { 0.0 };
            assert!((ri - expect).abs() < 1e-12, "row {i}: {ri}");
        }
        assert_eq!(op.tag(), BoundaryTag::Robin);
    }

    #[test]
    fn reaction_makes_rows_strictly_dominant() {
        for g in [unit(11), square(6)] {
            let n = g.len();
            let op = assemble_robin_elliptic(&g, &vec![1.0; n], &vec![1.0; n], &vec![1.0; n]).unwrap();
            for i in 0..n {
                let off: f64 = op.row(i).filter(|&(j, _)| j != i).map(|(_, v)| v.abs()).sum();
                assert!(op.get(i, i) > off);
            }
            assert!(op.has_m_matrix_signs());
        }
    }

    #[test]
    fn neumann_rows_sum_to_zero() {
        let g = square(7);
        let n = g.len();
        let a: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let op = assemble_neumann(&g, &a, &vec![0.0; n]).unwrap();
        assert!(op.row_sums().iter().all(|s| s.abs() < 1e-12));
        assert_eq!(op.tag(), BoundaryTag::Neumann);
    }

    #[test]
    fn assembly_rejects_bad_coefficients() {
        let g = unit(5);
        assert!(assemble_robin_elliptic(&g, &[1.0, 0.0, 1.0, 1.0, 1.0], &[0.0; 5], &[1.0; 5]).is_err());
        assert!(assemble_robin_elliptic(&g, &[1.0; 5], &[0.0; 5], &[0.0, 1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(assemble_robin_elliptic(&g, &[1.0; 5], &[-1.0; 5], &[1.0; 5]).is_err());
    }

    #[test]
    fn identity_solve() {
        let op = SparseOperator::identity(7);
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let x = solve_linear(&op, &b, 1e-12).unwrap();
        assert_eq!(x, b);
    }

    /// −V'' + V = f on [0,1] with −V'(0)+V(0) = r0, V'(1)+V(1) = r1 and
    /// exact V = cos(πx): f = (π²+1)cos(πx), r0 = 1, r1 = −1.
    fn robin_mms_error(n: usize) -> f64 {
        let g = unit(n);
        let op = assemble_robin_elliptic(&g, &vec![1.0; n], &vec![1.0; n], &vec![1.0; n]).unwrap();
        let f: Vec<f64> = g.axis(0).iter().map(|&x| (PI * PI + 1.0) * (PI * x).cos()).collect();
        let mut r = vec![0.0; n];
        r[0] = 1.0;
        r[n - 1] = -1.0;
        let rhs = integrated_rhs(&g, &f, &r);
        let x = solve_linear(&op, &rhs, 1e-12).unwrap();
        g.axis(0)
            .iter()
            .zip(&x)
            .map(|(&xi, v)| (v - (PI * xi).cos()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn robin_manufactured_second_order() {
        let e: Vec<f64> = [41, 81, 161].iter().map(|&n| robin_mms_error(n)).collect();
        for w in e.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.3, "order {order}, errors {e:?}");
        }
    }

    #[test]
    fn robin_manufactured_2d_krylov() {
        // V = cos(πx)cos(πy), −ΔV = 2π²V, ∂_ν V = 0 on the unit square, so the
        // Robin data is r = g·V.
        let err = |n: usize| {
            let g = square(n);
            let m = g.len();
            let op = assemble_robin_elliptic(&g, &vec![1.0; m], &vec![0.0; m], &vec![1.0; m]).unwrap();
            let exact: Vec<f64> = (0..m)
                .map(|i| {
                    let [x, y] = g.coord(i);
                    (PI * x).cos() * (PI * y).cos()
                })
                .collect();
            let f: Vec<f64> = exact.iter().map(|v| 2.0 * PI * PI * v).collect();
            let rhs = integrated_rhs(&g, &f, &exact);
            let x = solve_linear(&op, &rhs, 1e-12).unwrap();
            x.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(17), err(33));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.3, "order {order}");
    }

    #[test]
    fn singular_neumann_compatible_and_incompatible() {
        for g in [unit(31), square(9)] {
            let n = g.len();
            let op = assemble_neumann(&g, &vec![1.0; n], &vec![0.0; n]).unwrap();
            // Compatible: rhs orthogonal to the constant nullspace.
            let mut b: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
            let mean = b.iter().sum::<f64>() / n as f64;
            b.iter_mut().for_each(|v| *v -= mean);
            let x = solve_linear(&op, &b, 1e-10).unwrap();
            let r = residual(&op, &x, &b);
            assert!(norm2(&r) <= 1e-10 * norm2(&b).max(1.0));
            // Incompatible: add a constant component.
            let bad: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
            assert!(matches!(
                solve_linear(&op, &bad, 1e-10),
                Err(Error::NonConvergence { .. })
            ));
        }
    }

    #[test]
    fn discrete_maximum_principle_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let g = if trial % 2 == 0 { unit(25) } else { square(8) };
            let n = g.len();
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let gg: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let op = assemble_robin_elliptic(&g, &a, &c, &gg).unwrap();
            let x = solve_linear(&op, &integrated_rhs(&g, &f, &r), 1e-12).unwrap();
            assert!(x.iter().all(|&v| v >= -1e-12), "trial {trial}");
        }
    }
}
