//! `eval`: every method on a fixed task set across seeds and grid sizes.
//!
//! Tasks come from `train.seed` and are shared by all seeds and methods; each
//! eval seed draws its own prior samples, which every method then starts from.

use std::fmt::Write as _;
use std::path::Path;

use aid_core::actor_critic::{deploy, GuidanceModule};
use aid_core::backbone::{sample_prior, ScoreBackbone, ScoreModel};
use aid_core::baselines::{
    masked_mse, psnr_from_mse, run_baseline, summarize, write_eval_csv, write_summary_csv, BaselineKind, EvalRow,
    MetricReport,
};
use aid_core::checkpoint;
use aid_core::config::RunConfig;
use aid_core::solver::TimeGrid;
use aid_core::streams::Streams;
use aid_core::tasks::{sample_task, MaskFamily, Task};
use aid_core::Error;
use anyhow::{Context, Result};

use crate::train::{overhead_ratio, reference_params};
use crate::{create_dir, par_map, write_file, RunPaths};

pub const EVAL_CSV: &str = "eval.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TASKS_CSV: &str = "tasks.csv";
pub const EVAL_MANIFEST: &str = "eval_manifest.txt";
pub const AID: &str = "aid";

/// One evaluation task and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub id: usize,
    pub family_index: usize,
    pub family: MaskFamily,
    pub task: Task,
}

fn task_streams(seed: u64) -> Streams {
    Streams::new(seed).child("eval")
}

fn family_name(f: &MaskFamily) -> String {
    f.name().to_string()
}

/// Task `index` of family `family_index`, drawn from the `task` sub-stream.
pub fn make_task(cfg: &RunConfig, backbone: &ScoreBackbone, family_index: usize, index: usize) -> Result<Task> {
    let family = cfg.eval.families.get(family_index).with_context(|| format!("no eval family {family_index}"))?;
    let mut rng = task_streams(cfg.train.seed).stream("task", &[family_index as u64, index as u64]);
    Ok(sample_task(backbone, family, cfg.backbone.shape, &mut rng)?)
}

pub fn task_set(cfg: &RunConfig, backbone: &ScoreBackbone) -> Result<Vec<EvalTask>> {
    let mut out = Vec::new();
    for (fi, family) in cfg.eval.families.iter().enumerate() {
        for i in 0..cfg.eval.tasks {
            out.push(EvalTask { id: out.len(), family_index: fi, family: family.clone(), task: make_task(cfg, backbone, fi, i)? });
        }
    }
    Ok(out)
}

pub const TASKS_HEADER: &str = "task_id,mask_family,family_index,index,seed,dim";

/// Task manifest: enough to regenerate every task with [`make_task`].
pub fn tasks_csv(cfg: &RunConfig, tasks: &[EvalTask]) -> String {
    let mut s = format!("{TASKS_HEADER}\n");
    let per_family = cfg.eval.tasks;
    for t in tasks {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            t.id,
            family_name(&t.family),
            t.family_index,
            t.id - t.family_index * per_family,
            cfg.train.seed,
            t.task.dim()
        );
    }
    s
}

/// Regenerates tasks listed in a manifest written by [`tasks_csv`].
pub fn load_tasks(cfg: &RunConfig, backbone: &ScoreBackbone, manifest: &str) -> Result<Vec<EvalTask>> {
    let mut reader = csv::Reader::from_reader(manifest.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<u64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse { line, msg: format!("bad field {i} in task manifest") }.into())
        };
        let (id, fi, index, seed, dim) = (field(0)?, field(2)?, field(3)?, field(4)?, field(5)?);
        if seed != cfg.train.seed || dim as usize != backbone.dim() {
            return Err(Error::Parse { line, msg: "task manifest does not match the config".into() }.into());
        }
        let task = make_task(cfg, backbone, fi as usize, index as usize)?;
        out.push(EvalTask { id: id as usize, family_index: fi as usize, family: cfg.eval.families[fi as usize].clone(), task });
    }
    Ok(out)
}

#[derive(Debug)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MetricReport>,
    pub actor_params: usize,
    pub reference_params: usize,
    pub overhead_ratio: f64,
}

impl EvalOutput {
    /// Mean masked MSE of one method at one grid size over all rows.
    pub fn mean_mse(&self, method: &str, k: usize) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method && r.k == k).map(|r| r.masked_mse).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-seed mean masked MSE of one method at one grid size.
    pub fn seed_means(&self, method: &str, k: usize) -> Vec<f64> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
            .iter()
            .filter_map(|s| {
                let v: Vec<f64> =
                    self.rows.iter().filter(|r| r.method == method && r.k == k && r.seed == *s).map(|r| r.masked_mse).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

fn row(t: &EvalTask, method: &str, k: usize, nfe: usize, output: &[f64], seed: u64, range: f64, hash: &str) -> Result<EvalRow> {
    let mse = masked_mse(output, &t.task)?;
    Ok(EvalRow {
        task_id: t.id,
        mask_family: family_name(&t.family),
        method: method.into(),
        k,
        nfe,
        masked_mse: mse,
        masked_psnr: psnr_from_mse(mse, range)?,
        seed,
        config_hash: hash.into(),
    })
}

/// All rows for one task: seeds outermost, then AID at each deploy K, then
/// the baselines at each baseline K.
fn eval_task(cfg: &RunConfig, backbone: &ScoreBackbone, module: &GuidanceModule, t: &EvalTask) -> Result<Vec<EvalRow>> {
    let hash = cfg.hash();
    let range = cfg.data_range(backbone);
    let policy = cfg.policy()?;
    let baselines = [BaselineKind::Unguided, BaselineKind::Replacement, BaselineKind::dps(cfg.eval.dps_strength)?];
    let stream_key = ((t.family_index as u64) << 32) | t.id as u64;
    let mut rows = Vec::new();
    for &seed in &cfg.eval.seeds {
        let streams = task_streams(seed);
        let x0 = sample_prior(backbone.dim(), &cfg.schedule, &mut streams.stream("prior", &[stream_key]));
        for &k in &cfg.eval.deploy_k {
            let traj = deploy(module, backbone, &cfg.schedule, k, t.task.observable(), x0.clone(), &policy)?;
            rows.push(row(t, AID, k, traj.nfe, traj.terminal(), seed, range, &hash)?);
        }
        for &k in &cfg.eval.baseline_k {
            let grid = TimeGrid::new(cfg.schedule, k)?;
            for kind in &baselines {
                let out = run_baseline(kind, backbone, &grid, t.task.observable(), x0.clone(), &streams, stream_key)?;
                rows.push(row(t, kind.name(), k, out.nfe, &out.output, seed, range, &hash)?);
            }
        }
    }
    Ok(rows)
}

/// Evaluates in memory without writing files.
pub fn evaluate(cfg: &RunConfig, module: &GuidanceModule, jobs: usize) -> Result<EvalOutput> {
    let backbone = cfg.build_backbone()?;
    let tasks = task_set(cfg, &backbone)?;
    evaluate_tasks(cfg, &backbone, module, &tasks, jobs)
}

pub fn evaluate_tasks(
    cfg: &RunConfig,
    backbone: &ScoreBackbone,
    module: &GuidanceModule,
    tasks: &[EvalTask],
    jobs: usize,
) -> Result<EvalOutput> {
    let per_task = par_map(tasks, jobs, |t| eval_task(cfg, backbone, module, t));
    let mut rows = Vec::new();
    for r in per_task {
        rows.extend(r?);
    }
    Ok(EvalOutput {
        summary: summarize(&rows),
        rows,
        actor_params: module.phi.len(),
        reference_params: reference_params(cfg, backbone),
        overhead_ratio: overhead_ratio(cfg, backbone, module),
    })
}

pub fn cmd_eval(cfg: &RunConfig, paths: &RunPaths, jobs: usize) -> Result<EvalOutput> {
    let module = checkpoint::load(&paths.checkpoint).with_context(|| format!("loading {}", paths.checkpoint.display()))?;
    checkpoint::check_compatible(&module, &cfg.actor_spec(), &cfg.critic_spec())?;
    let backbone = cfg.build_backbone()?;
    let tasks = task_set(cfg, &backbone)?;
    let out = evaluate_tasks(cfg, &backbone, &module, &tasks, jobs)?;
    write_outputs(cfg, &paths.out, &tasks, &out)?;
    Ok(out)
}

pub fn write_outputs(cfg: &RunConfig, dir: &Path, tasks: &[EvalTask], out: &EvalOutput) -> Result<()> {
    create_dir(dir)?;
    let mut buf = Vec::new();
    write_eval_csv(&out.rows, &mut buf)?;
    write_file(&dir.join(EVAL_CSV), &buf)?;
    let mut buf = Vec::new();
    write_summary_csv(&out.summary, &mut buf)?;
    write_file(&dir.join(SUMMARY_CSV), &buf)?;
    write_file(&dir.join(TASKS_CSV), tasks_csv(cfg, tasks).as_bytes())?;
    let manifest = format!(
        "config_hash = {}\nactor_params = {}\nreference_params = {}\noverhead_ratio = {:.6}\n",
        cfg.hash(),
        out.actor_params,
        out.reference_params,
        out.overhead_ratio
    );
    write_file(&dir.join(EVAL_MANIFEST), manifest.as_bytes())
}
