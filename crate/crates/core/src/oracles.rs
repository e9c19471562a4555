//! Ground truth for the control problem.
//!
//! * [`riccati_solve`]: for affine drift `b = A(t) x + c(t)` and quadratic
//!   terminal `1/2 (x - x†)^T Q (x - x†)` the value is `1/2 x^T P x + q^T x + r`
//!   with
//!
//!   ```text
//!   P' = -(P A + A^T P) + P P / beta        P(T) = Q
//!   q' = -A^T q + P q / beta - P c          q(T) = -Q x†
//!   r' = -q^T c + |q|^2 / (2 beta)          r(T) = 1/2 x†^T Q x†
//!   ```
//!
//!   obtained by substituting the quadratic into `V_t + V_x b - |V_x|^2/(2 beta) = 0`.
//! * [`hjb_grid_solve`]: explicit finite differences for the same equation
//!   in one dimension, with an optional constant `lambda` source.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::backbone::{single_gaussian_rate, ScoreBackbone, SigmaPath};
use crate::error::{shape_check, Error, Result};

/// Affine reverse drift `b(t, x) = A(t) x + c(t)`.
pub trait AffineDynamics {
    fn dim(&self) -> usize;
    /// `(A(t), c(t))` using the piece of the schedule that contains `probe`.
    fn coefficients(&self, t: f64, probe: f64) -> (DMatrix<f64>, DVector<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantAffine {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl AffineDynamics for ConstantAffine {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn coefficients(&self, _t: f64, _probe: f64) -> (DMatrix<f64>, DVector<f64>) {
        (self.a.clone(), self.c.clone())
    }
}

/// Probability-flow drift of a single-Gaussian backbone: `A = -kappa I`, `c = kappa m`.
#[derive(Debug, Clone)]
pub struct GaussianDynamics {
    backbone: ScoreBackbone,
    path: SigmaPath,
}

impl GaussianDynamics {
    pub fn new(backbone: ScoreBackbone, path: SigmaPath) -> Result<Self> {
        if backbone.num_components() != 1 {
            return Err(Error::Domain("affine dynamics need a single-component backbone".into()));
        }
        Ok(Self { backbone, path })
    }

    pub fn path(&self) -> &SigmaPath {
        &self.path
    }
}

impl AffineDynamics for GaussianDynamics {
    fn dim(&self) -> usize {
        self.backbone.means()[0].len()
    }

    fn coefficients(&self, t: f64, probe: f64) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let kappa = single_gaussian_rate(&self.backbone, &self.path, t, probe);
        let m = DVector::from_column_slice(&self.backbone.means()[0]);
        (DMatrix::identity(d, d) * -kappa, m * kappa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    times: Vec<f64>,
    p: Vec<DMatrix<f64>>,
    q: Vec<DVector<f64>>,
    r: Vec<f64>,
}

/// Interpolation weights `(i, w)` such that `f(t) = (1 - w) f_i + w f_{i+1}`.
fn bracket(times: &[f64], t: f64) -> Result<(usize, f64)> {
    let (t0, t1) = (times[0], times[times.len() - 1]);
    if !(t >= t0 && t <= t1) {
        return Err(Error::Domain(format!("time {t} outside mesh [{t0}, {t1}]")));
    }
    let i = times.partition_point(|s| *s <= t).saturating_sub(1).min(times.len() - 2);
    let w = (t - times[i]) / (times[i + 1] - times[i]);
    Ok((i, w))
}

impl RiccatiSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn p_table(&self) -> &[DMatrix<f64>] {
        &self.p
    }

    pub fn q_table(&self) -> &[DVector<f64>] {
        &self.q
    }

    pub fn r_table(&self) -> &[f64] {
        &self.r
    }

    /// `(P(t), q(t), r(t))`, linear in `t` between mesh nodes.
    pub fn at(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let (i, w) = bracket(&self.times, t)?;
        Ok((
            &self.p[i] * (1.0 - w) + &self.p[i + 1] * w,
            &self.q[i] * (1.0 - w) + &self.q[i + 1] * w,
            self.r[i] * (1.0 - w) + self.r[i + 1] * w,
        ))
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        let (p, q, r) = self.at(t)?;
        shape_check("state", q.len(), x.len())?;
        let x = DVector::from_column_slice(x);
        Ok(0.5 * x.dot(&(&p * &x)) + q.dot(&x) + r)
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (p, q, _) = self.at(t)?;
        shape_check("state", q.len(), x.len())?;
        let x = DVector::from_column_slice(x);
        Ok((p * x + q).iter().copied().collect())
    }
}

type Triple = (DMatrix<f64>, DVector<f64>, f64);

fn riccati_rhs(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, c: &DVector<f64>, beta: f64) -> Triple {
    let dp = -(p * a + a.transpose() * p) + p * p / beta;
    let dq = -(a.transpose() * q) + p * q / beta - p * c;
    let dr = -q.dot(c) + q.norm_squared() / (2.0 * beta);
    (dp, dq, dr)
}

/// Backward RK4 on each interval between consecutive `breakpoints`, with
/// substeps no longer than `max_step` and no longer than the inverse of the
/// local stiffness `2|P|/beta + 2|A|`. Breakpoints should include every point
/// where the drift coefficients are not smooth.
pub fn riccati_solve<D: AffineDynamics + ?Sized>(
    dynamics: &D,
    q_weight: &DMatrix<f64>,
    x_dagger: &[f64],
    beta: f64,
    breakpoints: &[f64],
    max_step: f64,
) -> Result<RiccatiSolution> {
    let d = dynamics.dim();
    shape_check("terminal target", d, x_dagger.len())?;
    if q_weight.nrows() != d || q_weight.ncols() != d {
        return Err(Error::Shape(format!("terminal weight must be {d}x{d}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("breakpoints must be strictly increasing".into()));
    }
    if !(max_step > 0.0) {
        return Err(Error::Domain("max_step must be positive".into()));
    }
    let xd = DVector::from_column_slice(x_dagger);
    let mut p = q_weight.clone();
    let mut q = -(q_weight * &xd);
    let mut r = 0.5 * xd.dot(&(q_weight * &xd));

    let mut times = vec![*breakpoints.last().unwrap()];
    let mut ps = vec![p.clone()];
    let mut qs = vec![q.clone()];
    let mut rs = vec![r];
    for w in breakpoints.windows(2).rev() {
        let (lo, hi) = (w[0], w[1]);
        let probe = 0.5 * (lo + hi);
        let a_norm = [lo, probe, hi].iter().map(|t| dynamics.coefficients(*t, probe).0.norm()).fold(0.0, f64::max);
        let stiffness = 2.0 * p.norm() / beta + 2.0 * a_norm;
        let step = if stiffness > 0.0 { max_step.min(1.0 / stiffness) } else { max_step };
        let n = ((hi - lo) / step).ceil().max(1.0) as usize;
        let h = (hi - lo) / n as f64;
        for j in (0..n).rev() {
            let t1 = lo + (j + 1) as f64 * h;
            let t0 = if j == 0 { lo } else { lo + j as f64 * h };
            let f = |t: f64, p: &DMatrix<f64>, q: &DVector<f64>| {
                let (a, c) = dynamics.coefficients(t, probe);
                riccati_rhs(p, q, &a, &c, beta)
            };
            let hh = t0 - t1;
            let tm = 0.5 * (t0 + t1);
            let (k1p, k1q, k1r) = f(t1, &p, &q);
            let (k2p, k2q, k2r) = f(tm, &(&p + &k1p * (0.5 * hh)), &(&q + &k1q * (0.5 * hh)));
            let (k3p, k3q, k3r) = f(tm, &(&p + &k2p * (0.5 * hh)), &(&q + &k2q * (0.5 * hh)));
            let (k4p, k4q, k4r) = f(t0, &(&p + &k3p * hh), &(&q + &k3q * hh));
            p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (hh / 6.0);
            q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (hh / 6.0);
            r += (k1r + 2.0 * k2r + 2.0 * k3r + k4r) * (hh / 6.0);
            // Symmetrize against round-off drift.
            p = (&p + p.transpose()) * 0.5;
            if !(p.iter().all(|v| v.is_finite()) && q.iter().all(|v| v.is_finite()) && r.is_finite()) {
                return Err(Error::Numeric(format!("Riccati integration blew up at t = {t0}")));
            }
            times.push(t0);
            ps.push(p.clone());
            qs.push(q.clone());
            rs.push(r);
        }
    }
    times.reverse();
    ps.reverse();
    qs.reverse();
    rs.reverse();
    Ok(RiccatiSolution { times, p: ps, q: qs, r: rs })
}

/// `u* = -(P(t) x + q(t)) / beta`.
pub fn lq_optimal_control(solution: &RiccatiSolution, t: f64, x: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    Ok(solution.gradient(t, x)?.into_iter().map(|g| -g / beta).collect())
}

/// Uniform 1-D state mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateMesh {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl StateMesh {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(hi > lo) || points < 5 {
            return Err(Error::InvalidGrid(format!("state mesh needs hi > lo and >= 5 points, got [{lo}, {hi}] x {points}")));
        }
        Ok(Self { lo, hi, points })
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.points).map(|i| if i + 1 == self.points { self.hi } else { self.lo + i as f64 * dx }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbOptions {
    /// Safety factor on the stability bound.
    pub cfl: f64,
    /// When false every output interval is a single explicit step.
    pub adaptive: bool,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self { cfl: 0.5, adaptive: true }
    }
}

/// One-dimensional problem `V_t + V_x b(t, x) - V_x^2 / (2 beta) + lambda = 0`,
/// `V(T, x) = terminal(x) - lambda T`.
pub struct HjbProblem<'a> {
    pub drift: &'a dyn Fn(f64, f64) -> f64,
    pub terminal: &'a dyn Fn(f64) -> f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridValue {
    times: Vec<f64>,
    mesh: StateMesh,
    xs: Vec<f64>,
    /// `values[n][i]` is `V(times[n], xs[i])`.
    values: Vec<Vec<f64>>,
    lambda: f64,
    substeps: Vec<usize>,
}

/// First derivative with central differences inside and second-order one-sided
/// stencils at the ends (exact on quadratics).
fn derivative(v: &[f64], dx: f64, out: &mut [f64]) {
    let n = v.len();
    out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx);
    out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dx);
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / (2.0 * dx);
    }
}

fn max_second_difference(v: &[f64]) -> f64 {
    v.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).fold(0.0, f64::max)
}

impl GridValue {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[f64] {
        &self.xs
    }

    pub fn mesh(&self) -> &StateMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Explicit substeps used on each output interval.
    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    pub fn slice_gradient(&self, n: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.xs.len()];
        derivative(&self.values[n], self.mesh.dx(), &mut g);
        g
    }

    fn locate_x(&self, x: f64) -> Result<(usize, f64)> {
        if !(x >= self.mesh.lo && x <= self.mesh.hi) {
            return Err(Error::Domain(format!("state {x} outside mesh [{}, {}]", self.mesh.lo, self.mesh.hi)));
        }
        let dx = self.mesh.dx();
        let i = (((x - self.mesh.lo) / dx).floor() as usize).min(self.xs.len() - 2);
        Ok((i, (x - self.xs[i]) / dx))
    }

    /// `V(t, x)`, bilinear between mesh nodes.
    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        shape_check("state", 1, x.len())?;
        let (n, wt) = bracket(&self.times, t)?;
        let (i, wx) = self.locate_x(x[0])?;
        let at = |row: &Vec<f64>| row[i] * (1.0 - wx) + row[i + 1] * wx;
        Ok(at(&self.values[n]) * (1.0 - wt) + at(&self.values[n + 1]) * wt)
    }

    /// Discrete `V_x(t, x)`, bilinear interpolation of nodal differences.
    pub fn gradient(&self, t: f64, x: f64) -> Result<f64> {
        let (n, wt) = bracket(&self.times, t)?;
        let (i, wx) = self.locate_x(x)?;
        let at = |m: usize| {
            let g = self.slice_gradient(m);
            g[i] * (1.0 - wx) + g[i + 1] * wx
        };
        Ok(at(n) * (1.0 - wt) + at(n + 1) * wt)
    }
}

/// Backward explicit solve on `time_mesh` (ascending, ending at the horizon).
///
/// With `adaptive`, each output interval is split into `ceil(len / dt_max)`
/// equal substeps, where `dt_max = cfl * min(dx / c, dx^2 / (c^2 T))` and `c`
/// bounds the characteristic speed `|b - V_x / beta|` on the current slice.
/// The second term keeps the amplification of central differences under
/// forward Euler bounded over the whole horizon.
pub fn hjb_grid_solve(problem: &HjbProblem, mesh: StateMesh, time_mesh: &[f64], options: HjbOptions) -> Result<GridValue> {
    if time_mesh.len() < 2 || time_mesh.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("time mesh must be strictly increasing with >= 2 nodes".into()));
    }
    if !(problem.beta > 0.0 && problem.beta.is_finite()) {
        return Err(Error::Domain(format!("beta must be positive, got {}", problem.beta)));
    }
    if !(problem.lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {}", problem.lambda)));
    }
    let horizon = *time_mesh.last().unwrap();
    let xs = mesh.nodes();
    let dx = mesh.dx();
    let n_t = time_mesh.len();
    let mut v: Vec<f64> = xs.iter().map(|x| (problem.terminal)(*x) - problem.lambda * horizon).collect();
    if v.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("terminal function is not finite on the mesh".into()));
    }
    let osc_limit = 1e3 * (max_second_difference(&v) + dx * dx);
    let mut values = vec![Vec::new(); n_t];
    values[n_t - 1] = v.clone();
    let mut substeps = vec![0; n_t - 1];
    let mut vx = vec![0.0; xs.len()];
    let mut drift = vec![0.0; xs.len()];
    for n in (0..n_t - 1).rev() {
        let (lo, hi) = (time_mesh[n], time_mesh[n + 1]);
        let probe = 0.5 * (lo + hi);
        let steps = if options.adaptive {
            derivative(&v, dx, &mut vx);
            let mut c: f64 = 0.0;
            for (x, g) in xs.iter().zip(&vx) {
                for t in [lo, probe, hi] {
                    c = c.max(((problem.drift)(t, *x) - g / problem.beta).abs());
                }
            }
            let c = c.max(1e-12);
            let dt_max = options.cfl * (dx / c).min(dx * dx / (c * c * horizon));
            ((hi - lo) / dt_max).ceil().max(1.0) as usize
        } else {
            1
        };
        substeps[n] = steps;
        let h = (hi - lo) / steps as f64;
        for j in (0..steps).rev() {
            let t = lo + (j + 1) as f64 * h;
            derivative(&v, dx, &mut vx);
            for (b, x) in drift.iter_mut().zip(&xs) {
                *b = (problem.drift)(t, *x);
            }
            for i in 0..v.len() {
                v[i] += h * (vx[i] * drift[i] - vx[i] * vx[i] / (2.0 * problem.beta) + problem.lambda);
            }
        }
        if v.iter().any(|a| !a.is_finite()) || max_second_difference(&v) > osc_limit {
            return Err(Error::Solver(format!(
                "explicit HJB step became unstable on [{lo}, {hi}]; refine the time mesh or enable adaptive stepping"
            )));
        }
        values[n] = v.clone();
    }
    Ok(GridValue { times: time_mesh.to_vec(), mesh, xs, values, lambda: problem.lambda, substeps })
}

/// Largest `|V^lambda(t, x) - V(t, x) + lambda t|` over two solves on identical meshes.
pub fn value_shift_gap(base: &GridValue, shifted: &GridValue) -> Result<f64> {
    if base.times != shifted.times || base.xs != shifted.xs {
        return Err(Error::Shape("value-shift comparison needs identical meshes".into()));
    }
    let dl = shifted.lambda - base.lambda;
    let mut gap: f64 = 0.0;
    for ((t, a), b) in base.times.iter().zip(&base.values).zip(&shifted.values) {
        for (va, vb) in a.iter().zip(b) {
            gap = gap.max((vb - va + dl * t).abs());
        }
    }
    Ok(gap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub t: f64,
    pub x: f64,
    pub expected: f64,
    pub observed: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanRecoveryReport {
    pub rows: Vec<ProbeRow>,
    pub max_gap: f64,
    pub mean_gap: f64,
}

impl MeanRecoveryReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_gap <= tolerance
    }

    /// `probe,expected,observed,gap` rows followed by a summary line.
    pub fn write_csv<W: Write>(&self, name: &str, tolerance: f64, mut out: W) -> Result<()> {
        writeln!(out, "probe,t,x,expected,observed,gap")?;
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{},{}", r.t, r.x, r.expected, r.observed, r.gap)?;
        }
        let verdict = if self.passes(tolerance) { "PASS" } else { "FAIL" };
        writeln!(out, "# {name}: {verdict} max_gap={} mean_gap={} tolerance={tolerance}", self.max_gap, self.mean_gap)?;
        Ok(())
    }
}

/// Compares a mean field against `-V_x / beta` of a deterministic grid value.
pub fn verify_mean_recovery(
    grid: &GridValue,
    mean: &dyn Fn(f64, f64) -> f64,
    beta: f64,
    probes: &[(f64, f64)],
) -> Result<MeanRecoveryReport> {
    let mut rows = Vec::with_capacity(probes.len());
    for &(t, x) in probes {
        let expected = -grid.gradient(t, x)? / beta;
        let observed = mean(t, x);
        rows.push(ProbeRow { t, x, expected, observed, gap: (observed - expected).abs() });
    }
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    let mean_gap = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.gap).sum::<f64>() / rows.len() as f64 };
    Ok(MeanRecoveryReport { rows, max_gap, mean_gap })
}

/// Discrete HJB residual `V_t + V_x (b + mu) + beta mu^2 / 2 + lambda` at
/// node `(n, i)`; `V_t` is a central difference in time for `0 < n < N`.
pub fn policy_residual(problem: &HjbProblem, grid: &GridValue, n: usize, i: usize, mu: f64) -> f64 {
    let last = grid.times.len() - 1;
    let (a, b) = if n == 0 { (0, 1) } else if n == last { (last - 1, last) } else { (n - 1, n + 1) };
    let vt = (grid.values[b][i] - grid.values[a][i]) / (grid.times[b] - grid.times[a]);
    let vx = grid.slice_gradient(n)[i];
    let b = (problem.drift)(grid.times[n], grid.xs[i]);
    vt + vx * (b + mu) + 0.5 * problem.beta * mu * mu + problem.lambda
}
