//! Continuous-time actor-critic for the guidance module.
//!
//! Each iteration rolls out stochastic trajectories under the current Gaussian
//! policy, forms TD residuals
//! `delta_k = V_{k+1} - V_k + beta/2 |A_k|^2 dt_k` with the terminal value
//! anchored to `Psi(X_K) - lambda T`, and applies
//!
//! ```text
//! theta += a_c sum_k dV(t_k, X_k)/dtheta delta_k
//! phi   -= a_a sum_k (beta d / 2 lambda) (dmu/dphi)^T (A_k - mu_k) delta_k
//! ```
//!
//! through Adam with gradient clipping, critic first.

pub mod policy;

use std::io::Write;

use crate::backbone::{sample_prior, Schedule, ScoreBackbone, ScoreModel};
use crate::error::{shape_check, Error, Result};
use crate::neural::{AdamState, Cache, NetInput, NetSpec, Network, ParamVector};
use crate::solver::{rollout, GuidancePolicy, RolloutMode, TimeGrid, Trajectory};
use crate::streams::Streams;
use crate::tasks::{centered_terminal, sample_task, terminal_loss, MaskFamily, Observable, TerminalWeights};

pub use policy::{log_density, sample_action, PolicyConfig};

/// Actor and critic networks with their parameters and optimizer states.
#[derive(Debug, Clone)]
pub struct GuidanceModule {
    pub actor: Network,
    pub critic: Network,
    pub phi: ParamVector,
    pub theta: ParamVector,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl GuidanceModule {
    pub fn new<R: rand::Rng + ?Sized>(actor: NetSpec, critic: NetSpec, rng: &mut R) -> Result<Self> {
        let actor = Network::new(actor)?;
        let critic = Network::new(critic)?;
        if actor.spec().out_dim() != actor.spec().dim || critic.spec().out_dim() != 1 {
            return Err(Error::config("network.head", "actor needs a vector head and critic a scalar head"));
        }
        shape_check("critic dimension", actor.spec().dim, critic.spec().dim)?;
        let phi = actor.init(rng);
        let theta = critic.init(rng);
        let actor_opt = AdamState::new(phi.len());
        let critic_opt = AdamState::new(theta.len());
        Ok(Self { actor, critic, phi, theta, actor_opt, critic_opt })
    }

    pub fn dim(&self) -> usize {
        self.actor.spec().dim
    }

    pub fn mean(&self, sigma: f64, x: &[f64], xi: &Observable) -> Result<Vec<f64>> {
        self.actor.forward(&self.phi, &NetInput { sigma, x, xi })
    }

    /// `V(t, x; xi) = NN(t, x; xi) - lambda t`.
    pub fn value(&self, t: f64, sigma: f64, x: &[f64], xi: &Observable, lambda: f64) -> Result<f64> {
        crate::neural::forward_critic(&self.critic, &self.theta, t, &NetInput { sigma, x, xi }, lambda)
    }
}

/// Deterministic mean guidance of a module.
pub struct MeanGuidance<'a>(pub &'a GuidanceModule);

impl GuidancePolicy for MeanGuidance<'_> {
    fn mean(&self, _t: f64, sigma: f64, x: &[f64], xi: &Observable) -> Result<Vec<f64>> {
        self.0.mean(sigma, x, xi)
    }
}

/// `delta = V_next - V_curr + beta/2 |A|^2 dt`.
pub fn td_residual(v_next: f64, v_curr: f64, action: &[f64], beta: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let sq: f64 = action.iter().map(|a| a * a).sum();
    Ok(v_next - v_curr + 0.5 * beta * sq * dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub sigma: f64,
    pub dt: f64,
    pub state: Vec<f64>,
    pub value: f64,
    /// Parameter-free part of `value`, kept when values are refreshed.
    pub baseline: f64,
    pub mean: Vec<f64>,
    pub action: Vec<f64>,
    pub delta: f64,
}

/// Per-step records of one trajectory plus its terminal anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecords {
    pub steps: Vec<StepRecord>,
    /// `V_K = Psi(X_K) - lambda T`.
    pub terminal_value: f64,
    pub terminal_loss: f64,
    pub action_cost: f64,
    expected_steps: usize,
}

impl EpisodeRecords {
    /// Assemble records from per-step critic values `values[k]`, `k < K`.
    pub fn from_trajectory(
        traj: &Trajectory,
        values: &[f64],
        terminal_loss: f64,
        policy: &PolicyConfig,
        horizon: f64,
    ) -> Result<Self> {
        let k_steps = traj.steps();
        if values.len() != k_steps || traj.states.len() != k_steps + 1 || traj.means.len() != k_steps {
            return Err(Error::State(format!(
                "expected {k_steps} values and {} states, got {} and {}",
                k_steps + 1,
                values.len(),
                traj.states.len()
            )));
        }
        let terminal_value = terminal_loss - policy.lambda() * horizon;
        let mut steps = Vec::with_capacity(k_steps);
        for k in 0..k_steps {
            let dt = traj.times[k + 1] - traj.times[k];
            let next = if k + 1 == k_steps { terminal_value } else { values[k + 1] };
            let delta = td_residual(next, values[k], &traj.actions[k], policy.beta(), dt)?;
            if !delta.is_finite() {
                return Err(Error::Numeric(format!("non-finite TD residual at step {k}")));
            }
            steps.push(StepRecord {
                t: traj.times[k],
                sigma: traj.sigmas[k],
                dt,
                state: traj.states[k].clone(),
                value: values[k],
                baseline: 0.0,
                mean: traj.means[k].clone(),
                action: traj.actions[k].clone(),
                delta,
            });
        }
        Ok(Self { steps, terminal_value, terminal_loss, action_cost: traj.action_cost(), expected_steps: k_steps })
    }

    /// Declares the parameter-free part of each step's value.
    pub fn with_baselines(mut self, baselines: &[f64]) -> Result<Self> {
        shape_check("baselines", self.steps.len(), baselines.len())?;
        for (s, b) in self.steps.iter_mut().zip(baselines) {
            s.baseline = *b;
        }
        Ok(self)
    }

    /// Records for `expected_steps` grid steps, checked on use.
    pub fn with_expected_steps(mut self, k: usize) -> Self {
        self.expected_steps = k;
        self
    }

    fn check_complete(&self) -> Result<()> {
        if self.steps.len() != self.expected_steps || self.steps.is_empty() {
            return Err(Error::State(format!(
                "records cover {} of {} steps",
                self.steps.len(),
                self.expected_steps
            )));
        }
        Ok(())
    }

    /// Recompute critic values and residuals with new parameters.
    pub fn refresh_values(&mut self, module: &GuidanceModule, xi: &Observable, policy: &PolicyConfig) -> Result<()> {
        self.check_complete()?;
        for s in &mut self.steps {
            s.value = module.value(s.t, s.sigma, &s.state, xi, policy.lambda())? + s.baseline;
        }
        let n = self.steps.len();
        for k in 0..n {
            let next = if k + 1 == n { self.terminal_value } else { self.steps[k + 1].value };
            let s = &mut self.steps[k];
            s.delta = td_residual(next, s.value, &s.action, policy.beta(), s.dt)?;
        }
        Ok(())
    }
}

/// `sum_k dV(t_k, X_k)/dtheta delta_k`.
pub fn critic_gradient_accumulate(
    critic: &Network,
    theta: &ParamVector,
    records: &EpisodeRecords,
    xi: &Observable,
) -> Result<Vec<f64>> {
    records.check_complete()?;
    let mut dir = vec![0.0; theta.len()];
    let mut cache = Cache::default();
    for s in &records.steps {
        if s.delta == 0.0 {
            continue;
        }
        critic.forward_cached(theta, &NetInput { sigma: s.sigma, x: &s.state, xi }, &mut cache)?;
        critic.backward_cached(theta, &cache, &[s.delta], &mut dir)?;
    }
    Ok(dir)
}

/// `sum_k (beta d / 2 lambda) (dmu/dphi)^T (A_k - mu_k) delta_k`, the
/// gradient of `sum_k log pi(A_k) delta_k` with residuals held fixed.
pub fn actor_gradient_accumulate(
    actor: &Network,
    phi: &ParamVector,
    records: &EpisodeRecords,
    xi: &Observable,
    policy: &PolicyConfig,
) -> Result<Vec<f64>> {
    records.check_complete()?;
    let mut dir = vec![0.0; phi.len()];
    let mut cache = Cache::default();
    let factor = policy.score_factor();
    for s in &records.steps {
        if s.delta == 0.0 {
            continue;
        }
        actor.forward_cached(phi, &NetInput { sigma: s.sigma, x: &s.state, xi }, &mut cache)?;
        let cot: Vec<f64> = s
            .action
            .iter()
            .zip(cache.output())
            .map(|(a, m)| factor * (a - m) * s.delta)
            .collect();
        actor.backward_cached(phi, &cache, &cot, &mut dir)?;
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub iterations: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub clip_norm: f64,
    pub batch: usize,
    pub weights: TerminalWeights,
    pub family: MaskFamily,
    pub shape: Option<(usize, usize)>,
    pub seed: u64,
    /// Record wall-clock time in the log; off keeps logs byte-reproducible.
    pub log_wallclock: bool,
    /// Add [`observed_terminal_baseline`] to every critic value.
    pub critic_baseline: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::config("train.steps", "K must be at least 2"));
        }
        for (key, v) in [("train.critic_lr", self.critic_lr), ("train.actor_lr", self.actor_lr), ("train.clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if !self.family.is_training_family() {
            return Err(Error::config("task.family", format!("`{}` is held out from training", self.family)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 18,
            iterations: 0,
            critic_lr: 1e-4,
            actor_lr: 1e-4,
            clip_norm: 1.0,
            batch: 2,
            weights: TerminalWeights::default(),
            family: MaskFamily::Freeform,
            shape: Some((8, 8)),
            seed: 0,
            log_wallclock: false,
            critic_baseline: false,
        }
    }
}

/// `alpha_vis / 2 |M (D(sigma, x) - y)|^2`: the visible terminal loss at the
/// denoised estimate. Depends only on the state and the observable.
pub fn observed_terminal_baseline(
    backbone: &ScoreBackbone,
    weights: &TerminalWeights,
    sigma: f64,
    x: &[f64],
    xi: &Observable,
) -> Result<f64> {
    let d = if sigma == 0.0 { x.to_vec() } else { backbone.denoise(sigma, x)? };
    Ok(0.5
        * weights.alpha_vis
        * d.iter().zip(xi.mask.bits()).zip(&xi.observation).map(|((d, m), y)| m * (d - y) * (d - y)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_abs_delta: f64,
    pub mean_mu_norm: f64,
    pub terminal_loss: f64,
    pub action_cost: f64,
    pub wallclock_ms: u64,
}

pub const LOG_HEADER: &str =
    "iteration,batch_mean_abs_delta,batch_mean_mu_norm,batch_terminal_loss,batch_action_cost,wallclock_ms";

pub fn write_log<W: Write>(rows: &[LogRow], mut out: W) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.mean_abs_delta, r.mean_mu_norm, r.terminal_loss, r.action_cost, r.wallclock_ms
        )?;
    }
    Ok(())
}

/// One sampled task and its stochastic trajectory records.
fn collect_episode(
    module: &GuidanceModule,
    backbone: &ScoreBackbone,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    policy: &PolicyConfig,
    streams: &Streams,
    n: usize,
    b: usize,
) -> Result<(Observable, EpisodeRecords)> {
    let keys = [n as u64, b as u64];
    let task = sample_task(backbone, &cfg.family, cfg.shape, &mut streams.stream("task", &keys))?;
    let xi = task.observable().clone();
    let x0 = sample_prior(backbone.dim(), grid.schedule(), &mut streams.stream("prior", &keys));
    let mut rng = streams.stream("policy", &keys);
    let traj = rollout(backbone, grid, &MeanGuidance(module), &xi, RolloutMode::Stochastic, policy, Some(x0), &mut rng)?;
    let baselines = (0..grid.steps())
        .map(|k| {
            if cfg.critic_baseline {
                observed_terminal_baseline(backbone, &cfg.weights, grid.sigma(k), &traj.states[k], &xi)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let values = (0..grid.steps())
        .map(|k| Ok(module.value(grid.time(k), grid.sigma(k), &traj.states[k], &xi, policy.lambda())? + baselines[k]))
        .collect::<Result<Vec<_>>>()?;
    let psi = terminal_loss(&cfg.weights, traj.terminal(), &task)?;
    debug_assert_eq!(
        psi - policy.lambda() * grid.horizon(),
        centered_terminal(&cfg.weights, traj.terminal(), &task, policy.lambda(), grid.horizon())?
    );
    let rec = EpisodeRecords::from_trajectory(&traj, &values, psi, policy, grid.horizon())?.with_baselines(&baselines)?;
    Ok((xi, rec))
}

/// Observer called after every iteration; returning an error aborts training.
pub trait TrainObserver {
    fn after_iteration(&mut self, _n: usize, _module: &GuidanceModule, _row: &LogRow) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs `cfg.iterations` actor-critic iterations in place.
pub fn train(
    module: &mut GuidanceModule,
    backbone: &ScoreBackbone,
    schedule: &Schedule,
    cfg: &TrainConfig,
    policy: &PolicyConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    shape_check("policy dimension", module.dim(), policy.dim())?;
    shape_check("backbone dimension", module.dim(), backbone.dim())?;
    let grid = TimeGrid::new(*schedule, cfg.steps)?;
    let streams = Streams::new(cfg.seed).child("train");
    let start = std::time::Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    let inv_batch = 1.0 / cfg.batch as f64;
    for n in 0..cfg.iterations {
        let mut episodes = (0..cfg.batch)
            .map(|b| collect_episode(module, backbone, &grid, cfg, policy, &streams, n, b))
            .collect::<Result<Vec<_>>>()?;

        let mut row = LogRow { iteration: n, mean_abs_delta: 0.0, mean_mu_norm: 0.0, terminal_loss: 0.0, action_cost: 0.0, wallclock_ms: 0 };
        let mut g_critic = vec![0.0; module.theta.len()];
        for (xi, rec) in &episodes {
            let dir = critic_gradient_accumulate(&module.critic, &module.theta, rec, xi)?;
            // Ascent on the printed update direction, so Adam sees its negation.
            for (g, d) in g_critic.iter_mut().zip(&dir) {
                *g -= d * inv_batch;
            }
            let k = rec.steps.len() as f64;
            row.mean_abs_delta += rec.steps.iter().map(|s| s.delta.abs()).sum::<f64>() / k * inv_batch;
            row.mean_mu_norm += rec.steps.iter().map(|s| s.mean.iter().map(|m| m * m).sum::<f64>().sqrt()).sum::<f64>() / k * inv_batch;
            row.terminal_loss += rec.terminal_loss * inv_batch;
            row.action_cost += rec.action_cost * inv_batch;
        }
        module
            .critic_opt
            .step(module.theta.values_mut(), &g_critic, cfg.critic_lr, cfg.clip_norm)
            .map_err(|e| at_iteration(e, n))?;

        let mut g_actor = vec![0.0; module.phi.len()];
        for (xi, rec) in &mut episodes {
            rec.refresh_values(module, xi, policy)?;
            let dir = actor_gradient_accumulate(&module.actor, &module.phi, rec, xi, policy)?;
            for (g, d) in g_actor.iter_mut().zip(&dir) {
                *g += d * inv_batch;
            }
        }
        module
            .actor_opt
            .step(module.phi.values_mut(), &g_actor, cfg.actor_lr, cfg.clip_norm)
            .map_err(|e| at_iteration(e, n))?;

        if cfg.log_wallclock {
            row.wallclock_ms = start.elapsed().as_millis() as u64;
        }
        for v in [row.mean_abs_delta, row.mean_mu_norm, row.terminal_loss, row.action_cost] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite training statistic at iteration {n}")));
            }
        }
        observer.after_iteration(n, module, &row)?;
        log.push(row);
    }
    Ok(log)
}

fn at_iteration(e: Error, n: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("iteration {n}: {msg}")),
        other => other,
    }
}

/// Deterministic deployment: roll out the mean guidance from `x0` on a
/// `K`-step grid and return the full trajectory.
pub fn deploy<M: ScoreModel + ?Sized>(
    module: &GuidanceModule,
    backbone: &M,
    schedule: &Schedule,
    steps: usize,
    xi: &Observable,
    x0: Vec<f64>,
    policy: &PolicyConfig,
) -> Result<Trajectory> {
    let grid = TimeGrid::new(*schedule, steps)?;
    let mut unused = Streams::new(0).stream("unused", &[]);
    rollout(backbone, &grid, &MeanGuidance(module), xi, RolloutMode::Deterministic, policy, Some(x0), &mut unused)
}
