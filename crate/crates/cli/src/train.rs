//! `train`: runs actor-critic training and persists the module.

use std::fmt::Write as _;

use aid_core::actor_critic::{train, GuidanceModule, LogRow, TrainObserver, LOG_HEADER};
use aid_core::backbone::ScoreBackbone;
use aid_core::checkpoint;
use aid_core::config::RunConfig;
use anyhow::Result;

use crate::{create_dir, write_file, RunPaths};

pub const TRAIN_LOG: &str = "train_log.csv";

pub struct TrainOutput {
    pub module: GuidanceModule,
    pub log: Vec<LogRow>,
    pub config_hash: String,
}

/// Fresh module from the config's `init` stream.
pub fn init_module(cfg: &RunConfig) -> Result<GuidanceModule> {
    let mut rng = cfg.streams().stream("init", &[]);
    Ok(GuidanceModule::new(cfg.actor_spec(), cfg.critic_spec(), &mut rng)?)
}

/// Trains in memory without writing files.
pub fn train_module(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<(GuidanceModule, Vec<LogRow>)> {
    let backbone = cfg.build_backbone()?;
    let mut module = init_module(cfg)?;
    let log = train(&mut module, &backbone, &cfg.schedule(), &cfg.train_config(), &cfg.policy()?, observer)?;
    Ok((module, log))
}

/// Configured reference size, or the analytic backbone's own parameter count
/// (weights, means and variances) when unset.
pub fn reference_params(cfg: &RunConfig, backbone: &ScoreBackbone) -> usize {
    if cfg.network.reference_params > 0 {
        return cfg.network.reference_params;
    }
    backbone.num_components() * (cfg.backbone.dim + 2)
}

pub fn overhead_ratio(cfg: &RunConfig, backbone: &ScoreBackbone, module: &GuidanceModule) -> f64 {
    module.phi.len() as f64 / reference_params(cfg, backbone) as f64
}

pub fn manifest_entries(cfg: &RunConfig, module: &GuidanceModule) -> Result<Vec<(String, String)>> {
    let backbone = cfg.build_backbone()?;
    let e = |k: &str, v: String| (k.to_string(), v);
    Ok(vec![
        e("config_hash", cfg.hash()),
        e("mode", cfg.mode.name().into()),
        e("seed", cfg.train.seed.to_string()),
        e("alpha_vis", format!("{:?}", cfg.task.alpha_vis)),
        e("alpha_hole", format!("{:?}", cfg.task.alpha_hole)),
        e("beta", format!("{:?}", cfg.beta)),
        e("lambda", format!("{:?}", cfg.lambda)),
        e("K", cfg.train.steps.to_string()),
        e("iterations", cfg.train.iterations.to_string()),
        e("actor_params", module.phi.len().to_string()),
        e("critic_params", module.theta.len().to_string()),
        e("reference_params", reference_params(cfg, &backbone).to_string()),
        e("overhead_ratio", format!("{:.6}", overhead_ratio(cfg, &backbone, module))),
    ])
}

/// Training log with the config hash appended to every row.
pub fn log_csv(log: &[LogRow], hash: &str) -> String {
    let mut s = format!("{LOG_HEADER},config_hash\n");
    for r in log {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{},{hash}",
            r.iteration, r.mean_abs_delta, r.mean_mu_norm, r.terminal_loss, r.action_cost, r.wallclock_ms
        );
    }
    s
}

/// Writes the checkpoint, its manifest and the training log.
pub fn persist(cfg: &RunConfig, paths: &RunPaths, module: &GuidanceModule, log: &[LogRow]) -> Result<()> {
    create_dir(&paths.out)?;
    write_file(&paths.checkpoint, &checkpoint::encode(module))?;
    let mut manifest = Vec::new();
    checkpoint::write_manifest(&manifest_entries(cfg, module)?, &mut manifest)?;
    write_file(&paths.manifest(), &manifest)?;
    write_file(&paths.out.join(TRAIN_LOG), log_csv(log, &cfg.hash()).as_bytes())
}

pub fn cmd_train(cfg: &RunConfig, paths: &RunPaths) -> Result<TrainOutput> {
    let (module, log) = train_module(cfg, &mut ())?;
    persist(cfg, paths, &module, &log)?;
    Ok(TrainOutput { module, log, config_hash: cfg.hash() })
}
