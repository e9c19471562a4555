//! `sweep`: each of beta, lambda, alpha_vis and alpha_hole at half and double
//! its configured value with the others fixed, plus the shared default.

use std::fmt::Write as _;

use aid_core::config::{Mode, RunConfig};
use anyhow::Result;

use crate::eval::{evaluate, AID};
use crate::train::{persist, train_module};
use crate::verify::learned_mean_report;
use crate::{create_dir, par_map, write_file, RunPaths};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const PARAMETERS: [&str; 4] = ["beta", "lambda", "alpha_vis", "alpha_hole"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub parameter: &'static str,
    pub factor: f64,
    pub config: RunConfig,
}

fn scaled(cfg: &RunConfig, parameter: &str, factor: f64) -> RunConfig {
    let mut c = cfg.clone();
    match parameter {
        "beta" => c.beta *= factor,
        "lambda" => c.lambda *= factor,
        "alpha_vis" => c.task.alpha_vis *= factor,
        "alpha_hole" => c.task.alpha_hole *= factor,
        _ => unreachable!("unknown sweep parameter"),
    }
    c
}

/// The default point first, then each parameter at /2 and x2.
pub fn sweep_points(cfg: &RunConfig) -> Vec<SweepPoint> {
    let mut points = vec![SweepPoint { label: "default".into(), parameter: "default", factor: 1.0, config: cfg.clone() }];
    for p in PARAMETERS {
        for (tag, factor) in [("half", 0.5), ("double", 2.0)] {
            points.push(SweepPoint { label: format!("{p}_{tag}"), parameter: p, factor, config: scaled(cfg, p, factor) });
        }
    }
    points
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub parameter: String,
    pub factor: f64,
    pub beta: f64,
    pub lambda: f64,
    pub alpha_vis: f64,
    pub alpha_hole: f64,
    pub metric: String,
    pub value: f64,
    pub passed: Option<bool>,
    pub config_hash: String,
}

pub const SWEEP_HEADER: &str = "point,parameter,factor,beta,lambda,alpha_vis,alpha_hole,metric,value,passed,config_hash";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let passed = r.passed.map_or(String::new(), |p| p.to_string());
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{:?},{:?},{:?},{},{:e},{passed},{}",
            r.label, r.parameter, r.factor, r.beta, r.lambda, r.alpha_vis, r.alpha_hole, r.metric, r.value, r.config_hash
        );
    }
    s
}

/// Trains one point and measures it: the learned-mean relative error in LQ
/// mode, AID's mean masked MSE and PSNR at each deploy K otherwise.
pub fn run_point(point: &SweepPoint, paths: &RunPaths, eval_jobs: usize) -> Result<Vec<SweepRow>> {
    let cfg = &point.config;
    let (module, log) = train_module(cfg, &mut ())?;
    persist(cfg, &paths.nested(&point.label), &module, &log)?;
    let base = |metric: String, value: f64, passed: Option<bool>| SweepRow {
        label: point.label.clone(),
        parameter: point.parameter.into(),
        factor: point.factor,
        beta: cfg.beta,
        lambda: cfg.lambda,
        alpha_vis: cfg.task.alpha_vis,
        alpha_hole: cfg.task.alpha_hole,
        metric,
        value,
        passed,
        config_hash: cfg.hash(),
    };
    match cfg.mode {
        Mode::Lq => {
            let r = learned_mean_report(cfg, &module)?;
            Ok(vec![base("relative_l2".into(), r.relative_l2, Some(r.relative_l2 <= cfg.verify.learned_rel))])
        }
        Mode::Image => {
            let out = evaluate(cfg, &module, eval_jobs)?;
            let mut rows = Vec::new();
            for &k in &cfg.eval.deploy_k {
                let cell = out.summary.iter().find(|r| r.method == AID && r.k == k);
                if let Some(c) = cell {
                    rows.push(base(format!("masked_mse_K{k}"), c.mse_mean, None));
                    rows.push(base(format!("masked_psnr_K{k}"), c.psnr_mean, None));
                }
            }
            Ok(rows)
        }
    }
}

/// Runs all nine points, `jobs` at a time, and writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, paths: &RunPaths, jobs: usize) -> Result<Vec<SweepRow>> {
    let points = sweep_points(cfg);
    let sweep_paths = paths.nested("sweep");
    create_dir(&sweep_paths.out)?;
    let results = par_map(&points, jobs, |p| run_point(p, &sweep_paths, 1));
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    write_file(&paths.out.join(SWEEP_CSV), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_distinct_points() {
        for cfg in [RunConfig::image(), RunConfig::lq()] {
            let points = sweep_points(&cfg);
            assert_eq!(points.len(), 9);
            let mut hashes: Vec<String> = points.iter().map(|p| p.config.hash()).collect();
            hashes.sort();
            hashes.dedup();
            assert_eq!(hashes.len(), 9);
            assert_eq!(points[0].config, cfg);
        }
    }

    #[test]
    fn one_parameter_moves_at_a_time() {
        let cfg = RunConfig::image();
        let p = &sweep_points(&cfg)[3];
        assert_eq!((p.parameter, p.factor), ("lambda", 0.5));
        assert_eq!(p.config.lambda, cfg.lambda / 2.0);
        assert_eq!((p.config.beta, p.config.task.alpha_vis, p.config.task.alpha_hole), (cfg.beta, cfg.task.alpha_vis, cfg.task.alpha_hole));
    }
}
