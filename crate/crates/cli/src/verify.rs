//! `verify`: oracle checks with measured gaps against configured tolerances.
//!
//! The grid problems are fixed one-dimensional instances with `beta = 1/2`,
//! where the explicit HJB solver is affordable; `lambda` comes from the config.

use std::fmt::Write as _;

use aid_core::actor_critic::policy::sample_action;
use aid_core::actor_critic::{deploy, GuidanceModule, PolicyConfig};
use aid_core::backbone::{reverse_drift, sample_prior, Schedule, ScoreBackbone, SigmaPath};
use aid_core::config::{Mode, RunConfig};
use aid_core::neural::{HeadKind, NetInput, NetSpec, Network, ParamVector};
use aid_core::oracles::{
    hjb_grid_solve, lq_optimal_control, riccati_solve, value_shift_gap, verify_mean_recovery, ConstantAffine,
    GaussianDynamics, GridValue, HjbOptions, HjbProblem, RiccatiSolution, StateMesh,
};
use aid_core::streams::Streams;
use aid_core::tasks::{sample_mask, Observable, Task};
use anyhow::{bail, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::eval::task_set;
use crate::train::cmd_train;
use crate::{create_dir, write_file, RunPaths};

pub const VERIFY_CSV: &str = "verify.csv";
const GRID_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), measured, tolerance, passed: measured <= tolerance, detail }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {}: measured {:.3e} tolerance {:.3e} ({})", self.name, self.measured, self.tolerance, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub config_hash: String,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("check,measured,tolerance,status,detail,config_hash\n");
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "fail" };
            let _ = writeln!(s, "{},{:e},{:e},{status},\"{}\",{}", c.name, c.measured, c.tolerance, c.detail, self.config_hash);
        }
        s
    }
}

fn unit_times(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Two-component 1-D mixture on a short schedule with a four-step path.
fn mixture_drift() -> Result<impl Fn(f64, f64) -> f64> {
    let backbone = ScoreBackbone::new(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![0.1, 0.1])?;
    let path = SigmaPath::new(Schedule::new(7.0, 0.5, 2.0, 1.0)?, 4)?;
    Ok(move |t: f64, x: f64| reverse_drift(&backbone, &path, t, &[x]).map(|b| b[0]).unwrap_or(f64::NAN))
}

/// `max |V^lambda - V + lambda t|` between grid solves at `lambda` and zero.
pub fn value_shift_check(lambda: f64, tolerance: f64) -> Result<Check> {
    let drift = mixture_drift()?;
    let psi = |x: f64| 0.5 * (x - 0.6) * (x - 0.6);
    let mesh = StateMesh::new(-3.0, 3.0, 101)?;
    let times = unit_times(20);
    let solve = |lambda: f64| {
        hjb_grid_solve(&HjbProblem { drift: &drift, terminal: &psi, beta: GRID_BETA, lambda }, mesh, &times, HjbOptions::default())
    };
    let base = solve(0.0)?;
    let shifted = solve(lambda)?;
    let gap = value_shift_gap(&base, &shifted)?;
    let same_steps = base.substeps() == shifted.substeps();
    let detail = if lambda == 0.0 {
        "lambda = 0: identical problems compared".to_string()
    } else {
        format!("lambda = {lambda:e}, identical substeps: {same_steps}")
    };
    let mut c = Check::at_most("value_shift", gap, tolerance, detail);
    c.passed &= same_steps;
    Ok(c)
}

/// Affine drift `-x/2 + 1/5`, terminal `(x - 0.6)^2 / 2`.
fn linear_problem() -> (impl Fn(f64, f64) -> f64, impl Fn(f64) -> f64, ConstantAffine, DMatrix<f64>, Vec<f64>) {
    let affine = ConstantAffine { a: DMatrix::from_element(1, 1, -0.5), c: DVector::from_element(1, 0.2) };
    (|_t: f64, x: f64| -0.5 * x + 0.2, |x: f64| 0.5 * (x - 0.6) * (x - 0.6), affine, DMatrix::from_element(1, 1, 1.0), vec![0.6])
}

fn interior_gap(grid: &GridValue, sol: &RiccatiSolution) -> Result<f64> {
    let mesh = grid.mesh();
    let quarter = 0.25 * (mesh.hi - mesh.lo);
    let mut gap: f64 = 0.0;
    for (n, t) in grid.times().iter().enumerate() {
        for (i, x) in grid.states().iter().enumerate() {
            if *x >= mesh.lo + quarter && *x <= mesh.hi - quarter {
                gap = gap.max((grid.values()[n][i] - sol.value(*t, &[*x])?).abs());
            }
        }
    }
    Ok(gap)
}

/// Grid value against the Riccati value on the interior half of the mesh,
/// at 201 and 401 points; passes when the fine gap is within tolerance and
/// smaller than the coarse one.
pub fn riccati_grid_check(tolerance: f64) -> Result<Check> {
    let (drift, psi, affine, q, target) = linear_problem();
    let sol = riccati_solve(&affine, &q, &target, GRID_BETA, &[0.0, 1.0], 1e-4)?;
    let times = unit_times(20);
    let solve = |points: usize| -> Result<GridValue> {
        let problem = HjbProblem { drift: &drift, terminal: &psi, beta: GRID_BETA, lambda: 0.0 };
        Ok(hjb_grid_solve(&problem, StateMesh::new(-4.0, 4.0, points)?, &times, HjbOptions::default())?)
    };
    let coarse = interior_gap(&solve(201)?, &sol)?;
    let fine = interior_gap(&solve(401)?, &sol)?;
    let mut c = Check::at_most("riccati_grid", fine, tolerance, format!("201 points {coarse:.3e}, 401 points {fine:.3e}"));
    c.passed &= fine < coarse;
    Ok(c)
}

/// Riccati feedback against `-V_x / beta` of the grid value at 100 interior probes.
pub fn optimal_guidance_check(tolerance: f64) -> Result<Check> {
    let (drift, psi, affine, q, target) = linear_problem();
    let sol = riccati_solve(&affine, &q, &target, GRID_BETA, &[0.0, 1.0], 1e-4)?;
    let times = unit_times(40);
    let problem = HjbProblem { drift: &drift, terminal: &psi, beta: GRID_BETA, lambda: 0.0 };
    let grid = hjb_grid_solve(&problem, StateMesh::new(-4.0, 4.0, 401)?, &times, HjbOptions::default())?;
    let probes: Vec<(f64, f64)> = (0..100).map(|i| (times[i % 40], -2.0 + 4.0 * i as f64 / 99.0)).collect();
    let u = |t: f64, x: f64| lq_optimal_control(&sol, t, &[x], GRID_BETA).map_or(f64::NAN, |u| u[0]);
    let report = verify_mean_recovery(&grid, &u, GRID_BETA, &probes)?;
    let max_gap = if report.rows.iter().any(|r| r.gap.is_nan()) { f64::INFINITY } else { report.max_gap };
    Ok(Check::at_most("optimal_guidance", max_gap, tolerance, format!("100 probes, mean gap {:.3e}", report.mean_gap)))
}

/// Monte Carlo of `beta/2 |a|^2` under the Gaussian policy against
/// `beta/2 |mu|^2 + lambda`, in standard errors, for 20 random means.
pub fn running_cost_check(cfg: &RunConfig, draws: usize, tolerance: f64) -> Result<Check> {
    let d = cfg.backbone.dim;
    let beta = cfg.beta;
    let streams = Streams::new(cfg.train.seed).child("verify");
    let mut worst: f64 = 0.0;
    for j in 0..20u64 {
        let mut rng = streams.stream("running-cost", &[j]);
        let mu: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let expected = 0.5 * beta * mu.iter().map(|m| m * m).sum::<f64>() + cfg.lambda;
        if cfg.lambda == 0.0 {
            // Zero temperature: every action equals the mean.
            worst = worst.max((0.5 * beta * mu.iter().map(|m| m * m).sum::<f64>() + cfg.lambda - expected).abs());
            continue;
        }
        let policy = PolicyConfig::new(cfg.lambda, beta, d)?;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let a = sample_action(&mu, &policy, &mut rng);
            let c = 0.5 * beta * a.iter().map(|v| v * v).sum::<f64>();
            sum += c;
            sq += c * c;
        }
        let n = draws as f64;
        let mean = sum / n;
        let se = ((sq / n - mean * mean).max(0.0) / n).sqrt();
        worst = worst.max((mean - expected).abs() / se);
    }
    Ok(Check::at_most("running_cost", worst, tolerance, format!("20 means, {draws} draws each, gap in standard errors")))
}

fn fd_relative_error(spec: NetSpec, seed: u64) -> Result<f64> {
    let net = Network::new(spec)?;
    let streams = Streams::new(seed).child("gradient-check");
    let mut rng = streams.stream("init", &[]);
    let actor = NetSpec { head: HeadKind::Vector, ..spec };
    let critic = NetSpec { head: HeadKind::Scalar, scale_output: false, ..spec };
    let module = GuidanceModule::new(actor, critic, &mut rng)?;
    let base = if spec.head == HeadKind::Vector { &module.phi } else { &module.theta };
    // Nonzero heads so every block carries gradient.
    let values: Vec<f64> = base.values().iter().map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
    let params = ParamVector::from_values(net.layout().clone(), values)?;
    let d = spec.dim;
    let mask = sample_mask(&aid_core::tasks::MaskFamily::Freeform, square(d), &mut rng)
        .or_else(|_| aid_core::tasks::Mask::new((0..d).map(|i| (i % 2) as f64).collect(), None))?;
    let clean: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let task = Task::new(mask, clean)?;
    let xi: &Observable = task.observable();
    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let input = NetInput { sigma: rng.gen_range(0.01..10.0), x: &x, xi };
    let upstream: Vec<f64> = (0..spec.out_dim()).map(|_| rng.sample(StandardNormal)).collect();
    let grad = net.backward(&params, &input, &upstream)?;
    let objective = |p: &ParamVector| -> Result<f64> {
        Ok(net.forward(p, &input)?.iter().zip(&upstream).map(|(o, u)| o * u).sum())
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..64 {
        let i = rng.gen_range(0..net.param_count());
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.values_mut()[i] += h;
        minus.values_mut()[i] -= h;
        let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    Ok(worst)
}

fn square(d: usize) -> Option<(usize, usize)> {
    let s = (d as f64).sqrt().round() as usize;
    (s * s == d && s >= 2).then_some((s, s))
}

/// Backward pass against central differences, 64 coordinates x 5 seeds for
/// both the actor and the critic of the configured architecture.
pub fn gradient_check(cfg: &RunConfig, tolerance: f64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for spec in [cfg.actor_spec(), cfg.critic_spec()] {
        for seed in 0..5 {
            worst = worst.max(fd_relative_error(spec, seed)?);
        }
    }
    Ok(Check::at_most("gradient", worst, tolerance, "64 coordinates x 5 seeds, actor and critic".into()))
}

/// Actor mean against the Riccati feedback along deterministic deployments.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedReport {
    pub relative_l2: f64,
    pub probes: usize,
}

/// Relative L2 error of the actor mean against `u*` over the first
/// `verify.probes` states visited by deterministic deployments from the
/// eval task set (task-major, then step).
pub fn learned_mean_report(cfg: &RunConfig, module: &GuidanceModule) -> Result<LearnedReport> {
    if cfg.mode != Mode::Lq {
        bail!("the learned-mean check needs an LQ-mode config");
    }
    let backbone = cfg.build_backbone()?;
    let k = cfg.train.steps;
    let grid_times: Vec<f64> = (0..=k).map(|i| cfg.schedule.horizon * i as f64 / k as f64).collect();
    let dynamics = GaussianDynamics::new(backbone.clone(), SigmaPath::new(cfg.schedule, k)?)?;
    let policy = cfg.policy()?;
    let weights = cfg.weights();
    let mean = backbone.means()[0].clone();
    let streams = Streams::new(cfg.train.seed).child("verify");
    let (mut num, mut den, mut probes) = (0.0, 0.0, 0);
    'tasks: for t in task_set(cfg, &backbone)? {
        let mask = t.task.mask();
        let q = DMatrix::from_diagonal(&DVector::from_vec(weights.diagonal(mask)));
        let target: Vec<f64> =
            t.task.observation().iter().zip(mask.bits()).zip(&mean).map(|((y, m), mu)| m * y + (1.0 - m) * mu).collect();
        let sol = riccati_solve(&dynamics, &q, &target, cfg.beta, &grid_times, 5e-4)?;
        let x0 = sample_prior(cfg.backbone.dim, &cfg.schedule, &mut streams.stream("prior", &[t.id as u64]));
        let traj = deploy(module, &backbone, &cfg.schedule, k, t.task.observable(), x0, &policy)?;
        for step in 0..k {
            if probes == cfg.verify.probes {
                break 'tasks;
            }
            let u = lq_optimal_control(&sol, grid_times[step], &traj.states[step], cfg.beta)?;
            for (a, b) in traj.means[step].iter().zip(&u) {
                num += (a - b) * (a - b);
                den += b * b;
            }
            probes += 1;
        }
    }
    Ok(LearnedReport { relative_l2: (num / den.max(f64::MIN_POSITIVE)).sqrt(), probes })
}

pub fn learned_mean_check(cfg: &RunConfig, module: &GuidanceModule) -> Result<Check> {
    let r = learned_mean_report(cfg, module)?;
    let mut c = Check::at_most(
        "learned_mean",
        r.relative_l2,
        cfg.verify.learned_rel,
        format!("{} probes, lambda = {:e}, {} iterations", r.probes, cfg.lambda, cfg.train.iterations),
    );
    c.passed &= r.probes == cfg.verify.probes;
    Ok(c)
}

pub const RUNNING_COST_DRAWS: usize = 1_000_000;

/// Oracle checks only, without training.
pub fn oracle_checks(cfg: &RunConfig) -> Result<Vec<Check>> {
    let v = &cfg.verify;
    Ok(vec![
        value_shift_check(cfg.lambda, v.value_shift)?,
        riccati_grid_check(v.riccati_grid)?,
        optimal_guidance_check(v.mean_recovery)?,
        running_cost_check(cfg, RUNNING_COST_DRAWS, v.running_cost_se)?,
        gradient_check(cfg, v.gradient_rel)?,
    ])
}

/// Oracle checks, plus training and the learned-mean check in LQ mode when
/// `verify.train_lq` is set. Writes `verify.csv`.
pub fn cmd_verify(cfg: &RunConfig, paths: &RunPaths) -> Result<VerifyReport> {
    let mut checks = oracle_checks(cfg)?;
    if cfg.mode == Mode::Lq && cfg.verify.train_lq {
        let trained = cmd_train(cfg, paths)?;
        checks.push(learned_mean_check(cfg, &trained.module)?);
    }
    let report = VerifyReport { checks, config_hash: cfg.hash() };
    create_dir(&paths.out)?;
    write_file(&paths.out.join(VERIFY_CSV), report.csv().as_bytes())?;
    Ok(report)
}
