//! Fixed-backbone comparison samplers and masked-region metrics.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::actor_critic::policy::PolicyConfig;
use crate::backbone::{CountingScore, ScoreBackbone, ScoreModel};
use crate::error::{shape_check, Error, Result};
use crate::solver::{guided_step, rollout, GuidancePolicy, RolloutMode, TimeGrid};
use crate::streams::Streams;
use crate::tasks::{Observable, Task};

pub const DEFAULT_DPS_STRENGTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    Unguided,
    Replacement,
    DpsLite { strength: f64 },
}

impl BaselineKind {
    pub fn dps(strength: f64) -> Result<Self> {
        if !(strength.is_finite() && strength > 0.0) {
            return Err(Error::Domain(format!("dps strength must be finite and positive, got {strength}")));
        }
        Ok(Self::DpsLite { strength })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Unguided => "unguided",
            Self::Replacement => "replacement",
            Self::DpsLite { .. } => "dps_lite",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unguided" => Ok(Self::Unguided),
            "replacement" => Ok(Self::Replacement),
            "dps_lite" => Ok(Self::DpsLite { strength: DEFAULT_DPS_STRENGTH }),
            other => Err(Error::Domain(format!("unknown baseline '{other}'"))),
        }
    }
}

/// `-zeta * d/dx 1/2 |M x0_hat(x) - y|^2` with `x0_hat` the Tweedie estimate at `sigma`.
pub fn dps_control(
    backbone: &ScoreBackbone,
    sigma: f64,
    x: &[f64],
    xi: &Observable,
    strength: f64,
) -> Result<Vec<f64>> {
    shape_check("observable", backbone.dim(), xi.dim())?;
    let x0 = backbone.denoise(sigma, x)?;
    let residual: Vec<f64> = x0
        .iter()
        .zip(xi.mask.bits())
        .zip(&xi.observation)
        .map(|((a, m), y)| m * (m * a - y))
        .collect();
    let g = backbone.denoise_vjp(sigma, x, &residual)?;
    Ok(g.into_iter().map(|v| -strength * v).collect())
}

/// Half squared residual minimized by [`dps_control`].
pub fn dps_objective(backbone: &ScoreBackbone, sigma: f64, x: &[f64], xi: &Observable) -> Result<f64> {
    let x0 = backbone.denoise(sigma, x)?;
    Ok(0.5
        * x0.iter()
            .zip(xi.mask.bits())
            .zip(&xi.observation)
            .map(|((a, m), y)| (m * a - y).powi(2))
            .sum::<f64>())
}

struct DpsGuidance<'a> {
    backbone: &'a ScoreBackbone,
    strength: f64,
}

impl GuidancePolicy for DpsGuidance<'_> {
    fn mean(&self, _t: f64, sigma: f64, x: &[f64], xi: &Observable) -> Result<Vec<f64>> {
        dps_control(self.backbone, sigma, x, xi, self.strength)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub output: Vec<f64>,
    pub nfe: usize,
}

/// Runs a baseline sampler from `x0`.
///
/// Replacement noise is drawn from `streams.stream("baseline", [task_seed, k])`.
pub fn run_baseline(
    kind: &BaselineKind,
    backbone: &ScoreBackbone,
    grid: &TimeGrid,
    xi: &Observable,
    x0: Vec<f64>,
    streams: &Streams,
    task_seed: u64,
) -> Result<SamplerOutput> {
    let d = backbone.dim();
    shape_check("observable", d, xi.dim())?;
    shape_check("initial state", d, x0.len())?;
    // Actions are deterministic here, so the policy temperature is never used.
    let cfg = PolicyConfig::new(1.0, 1.0, d)?;
    let mut unused = streams.stream("baseline-unused", &[task_seed]);
    match kind {
        BaselineKind::Unguided => {
            let zero = |_: f64, _: f64, x: &[f64], _: &Observable| Ok(vec![0.0; x.len()]);
            let traj = rollout(backbone, grid, &zero, xi, RolloutMode::Deterministic, &cfg, Some(x0), &mut unused)?;
            Ok(SamplerOutput { output: traj.terminal().to_vec(), nfe: traj.nfe })
        }
        BaselineKind::DpsLite { strength } => {
            let policy = DpsGuidance { backbone, strength: *strength };
            let traj = rollout(backbone, grid, &policy, xi, RolloutMode::Deterministic, &cfg, Some(x0), &mut unused)?;
            Ok(SamplerOutput { output: traj.terminal().to_vec(), nfe: traj.nfe })
        }
        BaselineKind::Replacement => {
            let counted = CountingScore::new(backbone);
            let zero = vec![0.0; d];
            let mut x = x0;
            for k in 0..grid.steps() {
                x = guided_step(&counted, grid.path(), grid.time(k), grid.time(k + 1), &x, &zero)?;
                let sigma = grid.sigma(k + 1);
                let mut rng = streams.stream("baseline", &[task_seed, k as u64]);
                for ((xj, m), y) in x.iter_mut().zip(xi.mask.bits()).zip(&xi.observation) {
                    if *m == 1.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        *xj = if sigma == 0.0 { *y } else { y + sigma * z };
                    }
                }
            }
            Ok(SamplerOutput { output: x, nfe: counted.calls() })
        }
    }
}

/// Mean squared error over the missing coordinates.
pub fn masked_mse(output: &[f64], task: &Task) -> Result<f64> {
    shape_check("output", task.dim(), output.len())?;
    let missing = task.mask().missing_count();
    if missing == 0 {
        return Err(Error::Domain("masked metrics need a nonempty missing region".into()));
    }
    let sum: f64 = output
        .iter()
        .zip(task.clean())
        .zip(task.mask().bits())
        .map(|((o, c), m)| (1.0 - m) * (o - c) * (o - c))
        .sum();
    Ok(sum / missing as f64)
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(R^2 / mse)`, capped at 100 dB once `mse <= 1e-10 R^2`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    let r2 = data_range * data_range;
    if mse <= 1e-10 * r2 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (r2 / mse).log10())
}

pub fn masked_psnr(output: &[f64], task: &Task, data_range: f64) -> Result<f64> {
    psnr_from_mse(masked_mse(output, task)?, data_range)
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task_id: usize,
    pub mask_family: String,
    pub method: String,
    pub k: usize,
    pub nfe: usize,
    pub masked_mse: f64,
    pub masked_psnr: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub const EVAL_HEADER: &str = "task_id,mask_family,method,K,nfe,masked_mse,masked_psnr,seed,config_hash";

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], mut out: W) -> Result<()> {
    writeln!(out, "{EVAL_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{},{}",
            r.task_id, r.mask_family, r.method, r.k, r.nfe, r.masked_mse, r.masked_psnr, r.seed, r.config_hash
        )?;
    }
    Ok(())
}

/// Aggregate over one (method, family, K) cell: per-seed task means, then
/// mean and sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub mask_family: String,
    pub k: usize,
    pub nfe: usize,
    pub seeds: usize,
    pub tasks: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

pub const SUMMARY_HEADER: &str = "method,mask_family,K,nfe,seeds,tasks,mse_mean,mse_std,psnr_mean,psnr_std";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cells in first-appearance order.
pub fn summarize(rows: &[EvalRow]) -> Vec<MetricReport> {
    let mut cells: Vec<(String, String, usize)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.mask_family.clone(), r.k);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    cells
        .into_iter()
        .map(|(method, family, k)| {
            let cell: Vec<&EvalRow> =
                rows.iter().filter(|r| r.method == method && r.mask_family == family && r.k == k).collect();
            let mut seeds: Vec<u64> = cell.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let per_seed = |f: &dyn Fn(&EvalRow) -> f64| -> Vec<f64> {
                seeds
                    .iter()
                    .map(|s| {
                        let v: Vec<f64> = cell.iter().filter(|r| r.seed == *s).map(|r| f(r)).collect();
                        v.iter().sum::<f64>() / v.len() as f64
                    })
                    .collect()
            };
            let (mse_mean, mse_std) = mean_std(&per_seed(&|r| r.masked_mse));
            let (psnr_mean, psnr_std) = mean_std(&per_seed(&|r| r.masked_psnr));
            MetricReport {
                method,
                mask_family: family,
                k,
                nfe: cell[0].nfe,
                seeds: seeds.len(),
                tasks: cell.len() / seeds.len().max(1),
                mse_mean,
                mse_std,
                psnr_mean,
                psnr_std,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(reports: &[MetricReport], mut out: W) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{:e},{:e},{:e},{:e}",
            r.method, r.mask_family, r.k, r.nfe, r.seeds, r.tasks, r.mse_mean, r.mse_std, r.psnr_mean, r.psnr_std
        )?;
    }
    Ok(())
}

/// `sqrt(s_a^2 / n_a + s_b^2 / n_b)` over two samples.
pub fn pooled_standard_error(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_std(a);
    let (_, sb) = mean_std(b);
    (sa * sa / a.len() as f64 + sb * sb / b.len() as f64).sqrt()
}
