//! Frozen reverse dynamics: the EDM noise schedule, analytic Gaussian-mixture
//! score backbones and the probability-flow drift built from them.
//!
//! All schedules are variance exploding: the forward drift vanishes and
//! `g^2 = d(sigma^2)/dt`. Reverse time `t` runs from 0 (pure noise) to the
//! horizon `T` (clean data).

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_check, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    VarianceExploding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub horizon: f64,
    pub kind: ScheduleKind,
}

impl Schedule {
    pub fn new(rho: f64, sigma_min: f64, sigma_max: f64, horizon: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Domain(format!("rho must be positive, got {rho}")));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::Domain(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { rho, sigma_min, sigma_max, horizon, kind: ScheduleKind::VarianceExploding })
    }

    /// rho = 7, sigma in [0.002, 80], T = 1.
    pub fn edm() -> Self {
        Self::new(7.0, 0.002, 80.0, 1.0).expect("EDM constants are valid")
    }
}

/// The `k` noise levels of the EDM grid, from `sigma_max` down to `sigma_min`.
pub fn sigma_grid(k: usize, schedule: &Schedule) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 noise levels, got {k}")));
    }
    let inv = 1.0 / schedule.rho;
    let hi = schedule.sigma_max.powf(inv);
    let lo = schedule.sigma_min.powf(inv);
    Ok((0..k)
        .map(|i| {
            let s = i as f64 / (k - 1) as f64;
            (hi + s * (lo - hi)).powf(schedule.rho)
        })
        .collect())
}

/// Continuous noise level as a function of reverse time for a `K`-step sampler.
///
/// The `K` EDM grid levels sit at `t_k = T k / K` for `k < K`; the last
/// interval `[t_{K-1}, T]` ramps sigma linearly from `sigma_min` to zero, so
/// one Euler step across it is exactly the EDM final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPath {
    schedule: Schedule,
    steps: usize,
}

impl SigmaPath {
    pub fn new(schedule: Schedule, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(Self { schedule, steps })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon
    }

    /// Reverse time of the `sigma_min` node.
    pub fn t_last(&self) -> f64 {
        self.schedule.horizon * (self.steps - 1) as f64 / self.steps as f64
    }

    pub fn node_time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.schedule.horizon
        } else {
            self.schedule.horizon * k as f64 / self.steps as f64
        }
    }

    fn on_ramp(&self, probe: f64) -> bool {
        probe > self.t_last()
    }

    fn edm_base(&self, t: f64) -> f64 {
        let inv = 1.0 / self.schedule.rho;
        let hi = self.schedule.sigma_max.powf(inv);
        let lo = self.schedule.sigma_min.powf(inv);
        hi + (t / self.t_last()) * (lo - hi)
    }

    /// sigma(t) using the formula of the segment that contains `probe`.
    pub fn sigma_in(&self, t: f64, probe: f64) -> f64 {
        if self.on_ramp(probe) {
            let t_last = self.t_last();
            self.schedule.sigma_min * (self.schedule.horizon - t) / (self.schedule.horizon - t_last)
        } else {
            self.edm_base(t).powf(self.schedule.rho)
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_in(t, t)
    }

    /// `-d(sigma^2)/dt` in reverse time, i.e. the forward `g^2` at `T - t`,
    /// using the formula of the segment that contains `probe`.
    pub fn g_squared_in(&self, t: f64, probe: f64) -> f64 {
        if self.on_ramp(probe) {
            let span = self.schedule.horizon - self.t_last();
            2.0 * self.schedule.sigma_min.powi(2) * (self.schedule.horizon - t) / (span * span)
        } else {
            let inv = 1.0 / self.schedule.rho;
            let hi = self.schedule.sigma_max.powf(inv);
            let lo = self.schedule.sigma_min.powf(inv);
            let base = self.edm_base(t);
            2.0 * self.schedule.rho * base.powf(2.0 * self.schedule.rho - 1.0) * (hi - lo)
                / self.t_last()
        }
    }

    pub fn g_squared(&self, t: f64) -> f64 {
        self.g_squared_in(t, t)
    }
}

/// Anything that can evaluate the noised score `grad log p_sigma(x)`.
pub trait ScoreModel {
    fn dim(&self) -> usize;
    fn score_into(&self, sigma: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Counts score evaluations made through it.
pub struct CountingScore<'a, M: ?Sized> {
    inner: &'a M,
    calls: Cell<usize>,
}

impl<'a, M: ScoreModel + ?Sized> CountingScore<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for CountingScore<'_, M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score_into(&self, sigma: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.calls.set(self.calls.get() + 1);
        self.inner.score_into(sigma, x, out)
    }
}

/// Isotropic Gaussian mixture data distribution with exact noised scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBackbone {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

impl ScoreBackbone {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} weights, {} means, {} variances",
                weights.len(),
                means.len(),
                variances.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Domain("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain("component variances must be nonnegative".into()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Shape("dimension must be positive".into()));
        }
        for m in &means {
            shape_check("component mean", dim, m.len())?;
        }
        Ok(Self { weights, means, variances, dim })
    }

    pub fn single(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    fn widened(&self, i: usize, sigma: f64) -> Result<f64> {
        let a = self.variances[i] + sigma * sigma;
        if a <= 0.0 {
            return Err(Error::Domain(format!(
                "component {i} has zero variance at sigma = {sigma}"
            )));
        }
        Ok(a)
    }

    /// Log of the per-component weighted densities, `log w_i + log N(x; m_i, a_i I)`.
    fn component_log_terms(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        shape_check("state", self.dim, x.len())?;
        let d = self.dim as f64;
        let mut terms = Vec::with_capacity(self.weights.len());
        for (i, (w, m)) in self.weights.iter().zip(&self.means).enumerate() {
            let a = self.widened(i, sigma)?;
            if *w == 0.0 {
                terms.push(f64::NEG_INFINITY);
                continue;
            }
            let sq: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
            terms.push(
                w.ln() - 0.5 * sq / a - 0.5 * d * (2.0 * std::f64::consts::PI * a).ln(),
            );
        }
        Ok(terms)
    }

    pub fn log_density(&self, sigma: f64, x: &[f64]) -> Result<f64> {
        let terms = self.component_log_terms(sigma, x)?;
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln())
    }

    /// Posterior component responsibilities of the sigma-widened mixture.
    pub fn responsibilities(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut terms = self.component_log_terms(sigma, x)?;
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for t in terms.iter_mut() {
            *t = (*t - top).exp();
            total += *t;
        }
        for t in terms.iter_mut() {
            *t /= total;
        }
        Ok(terms)
    }

    pub fn score(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.score_into(sigma, x, &mut out)?;
        Ok(out)
    }

    /// Tweedie estimate `x + sigma^2 * score`.
    pub fn denoise(&self, sigma: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.score(sigma, x)?;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + sigma * sigma * *o;
        }
        Ok(out)
    }

    /// `J^T w` for the Jacobian `J` of [`Self::denoise`] with respect to `x`.
    ///
    /// The score Hessian is `-sum_i g_i / a_i I + sum_i g_i s_i s_i^T - s s^T`
    /// with `s_i = (m_i - x) / a_i` and `s = sum_i g_i s_i`; it is symmetric,
    /// so `J^T = J`.
    pub fn denoise_vjp(&self, sigma: f64, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        shape_check("cotangent", self.dim, w.len())?;
        let gamma = self.responsibilities(sigma, x)?;
        let mut inv_a_mean = 0.0;
        let mut mean_score = vec![0.0; self.dim];
        let mut outer = vec![0.0; self.dim];
        for (i, g) in gamma.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let a = self.widened(i, sigma)?;
            inv_a_mean += g / a;
            let s_i: Vec<f64> = self.means[i].iter().zip(x).map(|(m, xi)| (m - xi) / a).collect();
            let proj: f64 = s_i.iter().zip(w).map(|(s, wi)| s * wi).sum();
            for j in 0..self.dim {
                mean_score[j] += g * s_i[j];
                outer[j] += g * s_i[j] * proj;
            }
        }
        let proj_mean: f64 = mean_score.iter().zip(w).map(|(s, wi)| s * wi).sum();
        let s2 = sigma * sigma;
        Ok((0..self.dim)
            .map(|j| w[j] + s2 * (-inv_a_mean * w[j] + outer[j] - mean_score[j] * proj_mean))
            .collect())
    }

    /// One draw from the clean (sigma = 0) data distribution.
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let sd = self.variances[pick].sqrt();
        self.means[pick]
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + sd * z
            })
            .collect()
    }

    /// Per-coordinate standard deviation of the clean data, averaged over coordinates.
    pub fn data_std(&self) -> f64 {
        let d = self.dim as f64;
        let mut mean = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (a, b) in mean.iter_mut().zip(m) {
                *a += w * b;
            }
        }
        let mut var = 0.0;
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let spread: f64 = m.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            var += w * (v + spread / d);
        }
        var.sqrt()
    }

    /// Spread of the component means plus three component standard deviations.
    pub fn data_range(&self) -> f64 {
        let hi = self.means.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.means.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let sd = self.variances.iter().cloned().fold(0.0, f64::max).sqrt();
        (hi - lo) + 3.0 * sd
    }
}

impl ScoreModel for ScoreBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, sigma: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if !(sigma >= 0.0) {
            return Err(Error::Domain(format!("sigma must be nonnegative, got {sigma}")));
        }
        shape_check("state", self.dim, x.len())?;
        shape_check("score output", self.dim, out.len())?;
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.weights.len() == 1 {
            let a = self.widened(0, sigma)?;
            for ((o, m), xi) in out.iter_mut().zip(&self.means[0]).zip(x) {
                *o = (m - xi) / a;
            }
            return Ok(());
        }
        let gamma = self.responsibilities(sigma, x)?;
        for (i, g) in gamma.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let a = self.widened(i, sigma)?;
            for ((o, m), xi) in out.iter_mut().zip(&self.means[i]).zip(x) {
                *o += g * (m - xi) / a;
            }
        }
        Ok(())
    }
}

/// A draw from the wide Gaussian `N(0, sigma_max^2 I)` standing in for `p_T`.
pub fn sample_prior<R: Rng + ?Sized>(dim: usize, schedule: &Schedule, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            schedule.sigma_max * z
        })
        .collect()
}

/// `b(t, x) = 1/2 g^2(T - t) S(T - t, x)` evaluated on the segment containing `probe`.
pub fn reverse_drift_into<M: ScoreModel + ?Sized>(
    model: &M,
    path: &SigmaPath,
    t: f64,
    probe: f64,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let horizon = path.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Domain(format!("reverse time {t} outside [0, {horizon}]")));
    }
    let sigma = path.sigma_in(t, probe);
    model.score_into(sigma, x, out)?;
    let half_g2 = 0.5 * path.g_squared_in(t, probe);
    out.iter_mut().for_each(|o| *o *= half_g2);
    Ok(())
}

pub fn reverse_drift<M: ScoreModel + ?Sized>(
    model: &M,
    path: &SigmaPath,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.dim()];
    reverse_drift_into(model, path, t, t, x, &mut out)?;
    Ok(out)
}

/// For a single-component backbone the drift is affine, `b = -kappa(t) (x - m)`.
/// Returns `kappa(t)` on the segment containing `probe`.
pub fn single_gaussian_rate(backbone: &ScoreBackbone, path: &SigmaPath, t: f64, probe: f64) -> f64 {
    let sigma = path.sigma_in(t, probe);
    0.5 * path.g_squared_in(t, probe) / (backbone.variances()[0] + sigma * sigma)
}
