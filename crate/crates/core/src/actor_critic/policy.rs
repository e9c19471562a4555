//! Gaussian feedback policies `N(mu, 2 lambda / (beta d) I)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    lambda: f64,
    beta: f64,
    dim: usize,
}

impl PolicyConfig {
    pub fn new(lambda: f64, beta: f64, dim: usize) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        if dim == 0 {
            return Err(Error::Domain("policy dimension must be positive".into()));
        }
        Ok(Self { lambda, beta, dim })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-coordinate variance `2 lambda / (beta d)`.
    pub fn variance(&self) -> f64 {
        2.0 * self.lambda / (self.beta * self.dim as f64)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Factor `beta d / (2 lambda)` in `grad log pi = factor * J^T (A - mu)`.
    pub fn score_factor(&self) -> f64 {
        1.0 / self.variance()
    }
}

pub fn sample_action<R: Rng + ?Sized>(mu: &[f64], cfg: &PolicyConfig, rng: &mut R) -> Vec<f64> {
    let sd = cfg.std_dev();
    mu.iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            m + sd * z
        })
        .collect()
}

/// `log pi(a | mu)` for the isotropic Gaussian policy.
pub fn log_density(action: &[f64], mu: &[f64], cfg: &PolicyConfig) -> f64 {
    let var = cfg.variance();
    let sq: f64 = action.iter().zip(mu).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * sq / var - 0.5 * action.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::Streams;

    #[test]
    fn variance_example() {
        let cfg = PolicyConfig::new(1e-3, 1e-3, 4).unwrap();
        assert!((cfg.variance() - 0.5).abs() < 1e-15);
        assert!((cfg.score_factor() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(PolicyConfig::new(0.0, 1.0, 2).is_err());
        assert!(PolicyConfig::new(1.0, -1.0, 2).is_err());
        assert!(PolicyConfig::new(1.0, 1.0, 0).is_err());
        assert!(PolicyConfig::new(f64::NAN, 1.0, 2).is_err());
    }

    #[test]
    fn empirical_mean_matches() {
        let cfg = PolicyConfig::new(1e-3, 1e-3, 4).unwrap();
        let mu = [0.3, -1.0, 2.0, 0.0];
        let mut rng = Streams::new(3).stream("policy", &[]);
        let n = 100_000;
        let mut sum = [0.0; 4];
        for _ in 0..n {
            let a = sample_action(&mu, &cfg, &mut rng);
            for (s, v) in sum.iter_mut().zip(&a) {
                *s += v;
            }
        }
        let se = cfg.std_dev() / (n as f64).sqrt();
        for (s, m) in sum.iter().zip(&mu) {
            assert!((s / n as f64 - m).abs() < 4.0 * se);
        }
    }

    #[test]
    fn log_density_gradient_matches_score() {
        let cfg = PolicyConfig::new(2e-3, 1e-3, 3).unwrap();
        let a = [0.5, -0.2, 1.0];
        let mu = [0.1, 0.3, 0.7];
        let h = 1e-6;
        for j in 0..3 {
            let mut p = mu;
            let mut m = mu;
            p[j] += h;
            m[j] -= h;
            let fd = (log_density(&a, &p, &cfg) - log_density(&a, &m, &cfg)) / (2.0 * h);
            let exact = cfg.score_factor() * (a[j] - mu[j]);
            assert!((fd - exact).abs() < 1e-6 * exact.abs().max(1.0));
        }
    }
}
