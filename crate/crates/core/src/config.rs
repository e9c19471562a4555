//! Line-oriented run configuration: `[section]` headers and `key = value` lines.
//!
//! A file starts from the preset selected by `mode` (top level, default
//! `image`) and overrides individual keys. Unknown keys are errors.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::actor_critic::policy::PolicyConfig;
use crate::actor_critic::TrainConfig;
use crate::backbone::{Schedule, ScoreBackbone};
use crate::error::{Error, Result};
use crate::neural::NetSpec;
use crate::streams::Streams;
use crate::tasks::{Mask, MaskFamily, TerminalWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lq,
    Image,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Lq => "lq",
            Mode::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSection {
    pub dim: usize,
    pub shape: Option<(usize, usize)>,
    pub components: usize,
    pub variance: f64,
    pub mean_scale: f64,
    /// Explicit component means; generated from `seed` when empty.
    pub means: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub family: MaskFamily,
    pub alpha_vis: f64,
    pub alpha_hole: f64,
    /// Metric data range; derived from the backbone when `None`.
    pub data_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub steps: usize,
    pub iterations: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub clip: f64,
    pub batch: usize,
    pub seed: u64,
    pub critic_baseline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSection {
    pub embed_width: usize,
    pub stem_width: usize,
    pub stem_blocks: usize,
    pub trunk_width: usize,
    pub trunk_blocks: usize,
    pub scale_actor_output: bool,
    /// Reference backbone size for the overhead ratio.
    pub reference_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub tasks: usize,
    pub families: Vec<MaskFamily>,
    pub seeds: Vec<u64>,
    pub deploy_k: Vec<usize>,
    pub dps_strength: f64,
    /// Baseline grid size for the replacement and dps comparisons.
    pub baseline_k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    pub value_shift: f64,
    pub riccati_grid: f64,
    pub mean_recovery: f64,
    pub learned_rel: f64,
    pub running_cost_se: f64,
    pub gradient_rel: f64,
    pub probes: usize,
    /// Train the LQ actor inside `verify` (slow); otherwise only oracle checks run.
    pub train_lq: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    pub out: String,
    /// Empty means `<out>/checkpoint.bin`.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub backbone: BackboneSection,
    pub schedule: Schedule,
    pub task: TaskSection,
    pub beta: f64,
    pub lambda: f64,
    pub train: TrainSection,
    pub network: NetworkSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// 8x8 Gaussian-mixture images with free-form masks.
    pub fn image() -> Self {
        Self {
            mode: Mode::Image,
            backbone: BackboneSection {
                dim: 64,
                shape: Some((8, 8)),
                components: 8,
                variance: 0.05,
                mean_scale: 1.0,
                means: Vec::new(),
                seed: 7,
            },
            schedule: Schedule::edm(),
            task: TaskSection { family: MaskFamily::Freeform, alpha_vis: 2.0, alpha_hole: 1.0, data_range: None },
            beta: 1e-3,
            lambda: 1e-3,
            train: TrainSection {
                steps: 18,
                iterations: 20_000,
                critic_lr: 1e-3,
                actor_lr: 1e-4,
                clip: 1.0,
                batch: 2,
                seed: 0,
                critic_baseline: true,
            },
            network: NetworkSection {
                embed_width: 16,
                stem_width: 32,
                stem_blocks: 2,
                trunk_width: 64,
                trunk_blocks: 4,
                scale_actor_output: true,
                reference_params: 0,
            },
            eval: EvalSection {
                tasks: 200,
                families: vec![MaskFamily::Freeform],
                seeds: vec![0, 1, 2],
                deploy_k: vec![18, 12],
                dps_strength: 100.0,
                baseline_k: vec![18, 12],
            },
            verify: VerifySection {
                value_shift: 1e-10,
                riccati_grid: 1e-3,
                mean_recovery: 1e-3,
                learned_rel: 0.15,
                running_cost_se: 4.0,
                gradient_rel: 1e-4,
                probes: 256,
                train_lq: false,
            },
            paths: PathsSection { out: "out".into(), checkpoint: String::new() },
        }
    }

    /// Four-dimensional single Gaussian with a fixed mask, the linear-quadratic case.
    pub fn lq() -> Self {
        let mut c = Self::image();
        c.mode = Mode::Lq;
        c.backbone = BackboneSection {
            dim: 4,
            shape: None,
            components: 1,
            variance: 1.0,
            mean_scale: 1.0,
            means: vec![vec![0.5, -0.5, 0.0, 1.0]],
            seed: 7,
        };
        c.task = TaskSection {
            family: MaskFamily::Fixed(Mask::new(vec![1.0, 1.0, 0.0, 0.0], None).expect("static mask")),
            alpha_vis: 2.0,
            alpha_hole: 1.0,
            data_range: None,
        };
        c.train.iterations = 50_000;
        c.train.critic_baseline = false;
        c.eval.tasks = 16;
        c.eval.families = vec![c.task.family.clone()];
        c.verify.train_lq = true;
        c
    }

    pub fn preset(mode: Mode) -> Self {
        match mode {
            Mode::Lq => Self::lq(),
            Mode::Image => Self::image(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mode = Mode::Image;
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse { line: line_no, msg: format!("unterminated section header '{line}'") })?;
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(Error::config(section, "unknown section"));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected 'key = value', got '{line}'") })?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            let value = v.trim().to_string();
            if key == "mode" {
                mode = match value.as_str() {
                    "lq" => Mode::Lq,
                    "image" => Mode::Image,
                    other => return Err(Error::config("mode", format!("expected lq or image, got '{other}'"))),
                };
                continue;
            }
            if entries.iter().any(|(_, k2, _)| *k2 == key) {
                return Err(Error::config(key, format!("duplicate key on line {line_no}")));
            }
            entries.push((line_no, key, value));
        }
        let mut cfg = Self::preset(mode);
        for (_, key, value) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key;
        match key {
            "backbone.dim" => self.backbone.dim = parse_num(k, value)?,
            "backbone.shape" => self.backbone.shape = parse_shape(k, value)?,
            "backbone.components" => self.backbone.components = parse_num(k, value)?,
            "backbone.variance" => self.backbone.variance = parse_num(k, value)?,
            "backbone.mean_scale" => self.backbone.mean_scale = parse_num(k, value)?,
            "backbone.means" => {
                self.backbone.means = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(';').map(|m| parse_list::<f64>(k, m, ' ')).collect::<Result<_>>()?
                }
            }
            "backbone.seed" => self.backbone.seed = parse_num(k, value)?,
            "schedule.rho" => self.schedule.rho = parse_num(k, value)?,
            "schedule.sigma_min" => self.schedule.sigma_min = parse_num(k, value)?,
            "schedule.sigma_max" => self.schedule.sigma_max = parse_num(k, value)?,
            "schedule.horizon" => self.schedule.horizon = parse_num(k, value)?,
            "task.family" => self.task.family = parse_family(k, value, self.backbone.dim)?,
            "task.alpha_vis" => self.task.alpha_vis = parse_num(k, value)?,
            "task.alpha_hole" => self.task.alpha_hole = parse_num(k, value)?,
            "task.data_range" => {
                self.task.data_range = if value == "auto" { None } else { Some(parse_num(k, value)?) }
            }
            "policy.beta" => self.beta = parse_num(k, value)?,
            "policy.lambda" => self.lambda = parse_num(k, value)?,
            "train.steps" => self.train.steps = parse_num(k, value)?,
            "train.iterations" => self.train.iterations = parse_num(k, value)?,
            "train.critic_lr" => self.train.critic_lr = parse_num(k, value)?,
            "train.actor_lr" => self.train.actor_lr = parse_num(k, value)?,
            "train.clip" => self.train.clip = parse_num(k, value)?,
            "train.batch" => self.train.batch = parse_num(k, value)?,
            "train.seed" => self.train.seed = parse_num(k, value)?,
            "train.critic_baseline" => self.train.critic_baseline = parse_bool(k, value)?,
            "network.embed_width" => self.network.embed_width = parse_num(k, value)?,
            "network.stem_width" => self.network.stem_width = parse_num(k, value)?,
            "network.stem_blocks" => self.network.stem_blocks = parse_num(k, value)?,
            "network.trunk_width" => self.network.trunk_width = parse_num(k, value)?,
            "network.trunk_blocks" => self.network.trunk_blocks = parse_num(k, value)?,
            "network.scale_actor_output" => self.network.scale_actor_output = parse_bool(k, value)?,
            "network.reference_params" => self.network.reference_params = parse_num(k, value)?,
            "eval.tasks" => self.eval.tasks = parse_num(k, value)?,
            "eval.families" => {
                let dim = self.backbone.dim;
                self.eval.families =
                    value.split(',').map(|f| parse_family(k, f.trim(), dim)).collect::<Result<_>>()?
            }
            "eval.seeds" => self.eval.seeds = parse_list(k, value, ',')?,
            "eval.deploy_k" => self.eval.deploy_k = parse_list(k, value, ',')?,
            "eval.baseline_k" => self.eval.baseline_k = parse_list(k, value, ',')?,
            "eval.dps_strength" => self.eval.dps_strength = parse_num(k, value)?,
            "verify.value_shift" => self.verify.value_shift = parse_num(k, value)?,
            "verify.riccati_grid" => self.verify.riccati_grid = parse_num(k, value)?,
            "verify.mean_recovery" => self.verify.mean_recovery = parse_num(k, value)?,
            "verify.learned_rel" => self.verify.learned_rel = parse_num(k, value)?,
            "verify.running_cost_se" => self.verify.running_cost_se = parse_num(k, value)?,
            "verify.gradient_rel" => self.verify.gradient_rel = parse_num(k, value)?,
            "verify.probes" => self.verify.probes = parse_num(k, value)?,
            "verify.train_lq" => self.verify.train_lq = parse_bool(k, value)?,
            "paths.out" => self.paths.out = value.to_string(),
            "paths.checkpoint" => self.paths.checkpoint = value.to_string(),
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.dim == 0 {
            return Err(Error::config("backbone.dim", "must be positive"));
        }
        if let Some((h, w)) = b.shape {
            if h * w != b.dim {
                return Err(Error::config("backbone.shape", format!("{h}x{w} does not match dim {}", b.dim)));
            }
        }
        if b.components == 0 {
            return Err(Error::config("backbone.components", "must be positive"));
        }
        positive("backbone.variance", b.variance)?;
        positive("backbone.mean_scale", b.mean_scale)?;
        if !b.means.is_empty() {
            if b.means.len() != b.components {
                return Err(Error::config("backbone.means", format!("expected {} means", b.components)));
            }
            if b.means.iter().any(|m| m.len() != b.dim) {
                return Err(Error::config("backbone.means", format!("each mean needs {} entries", b.dim)));
            }
        }
        Schedule::new(self.schedule.rho, self.schedule.sigma_min, self.schedule.sigma_max, self.schedule.horizon)
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        TerminalWeights::new(self.task.alpha_vis, self.task.alpha_hole)
            .map_err(|e| Error::config("task.alpha_vis", e.to_string()))?;
        if let MaskFamily::Fixed(m) = &self.task.family {
            if m.dim() != b.dim {
                return Err(Error::config("task.family", "fixed mask length differs from backbone.dim"));
            }
        }
        if let Some(r) = self.task.data_range {
            positive("task.data_range", r)?;
        }
        positive("policy.beta", self.beta)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("policy.lambda", format!("must be finite and nonnegative, got {}", self.lambda)));
        }
        let t = &self.train;
        if t.steps < 2 {
            return Err(Error::config("train.steps", "must be at least 2"));
        }
        positive("train.critic_lr", t.critic_lr)?;
        positive("train.actor_lr", t.actor_lr)?;
        positive("train.clip", t.clip)?;
        if t.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !self.task.family.is_training_family() {
            return Err(Error::config("task.family", "held-out families cannot be used for training"));
        }
        self.actor_spec().validate().map_err(|e| Error::config("network", e.to_string()))?;
        if self.eval.tasks == 0 {
            return Err(Error::config("eval.tasks", "must be positive"));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed"));
        }
        if self.eval.deploy_k.iter().chain(&self.eval.baseline_k).any(|k| *k < 2) {
            return Err(Error::config("eval.deploy_k", "every K must be at least 2"));
        }
        positive("eval.dps_strength", self.eval.dps_strength)?;
        for (key, v) in [
            ("verify.value_shift", self.verify.value_shift),
            ("verify.riccati_grid", self.verify.riccati_grid),
            ("verify.mean_recovery", self.verify.mean_recovery),
            ("verify.learned_rel", self.verify.learned_rel),
            ("verify.running_cost_se", self.verify.running_cost_se),
            ("verify.gradient_rel", self.verify.gradient_rel),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Canonical text of every resolved key, sorted; parsing it reproduces `self`.
    pub fn to_canonical(&self) -> String {
        let mut out = format!("mode = {}\n", self.mode.name());
        let mut section = String::new();
        for (key, value) in self.entries() {
            let (s, k) = key.split_once('.').expect("keys are sectioned");
            if s != section {
                out.push_str(&format!("[{s}]\n"));
                section = s.to_string();
            }
            out.push_str(&format!("{k} = {value}\n"));
        }
        out
    }

    fn entries(&self) -> BTreeMap<String, String> {
        let b = &self.backbone;
        let join = |v: &[String], sep: &str| v.join(sep);
        let nums = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("backbone.dim", b.dim.to_string());
        put("backbone.shape", b.shape.map_or("none".into(), |(h, w)| format!("{h}x{w}")));
        put("backbone.components", b.components.to_string());
        put("backbone.variance", format!("{:?}", b.variance));
        put("backbone.mean_scale", format!("{:?}", b.mean_scale));
        put("backbone.means", b.means.iter().map(|v| nums(v)).collect::<Vec<_>>().join(" ; "));
        put("backbone.seed", b.seed.to_string());
        put("schedule.rho", format!("{:?}", self.schedule.rho));
        put("schedule.sigma_min", format!("{:?}", self.schedule.sigma_min));
        put("schedule.sigma_max", format!("{:?}", self.schedule.sigma_max));
        put("schedule.horizon", format!("{:?}", self.schedule.horizon));
        put("task.family", family_text(&self.task.family));
        put("task.alpha_vis", format!("{:?}", self.task.alpha_vis));
        put("task.alpha_hole", format!("{:?}", self.task.alpha_hole));
        put("task.data_range", self.task.data_range.map_or("auto".into(), |r| format!("{r:?}")));
        put("policy.beta", format!("{:?}", self.beta));
        put("policy.lambda", format!("{:?}", self.lambda));
        let t = &self.train;
        put("train.steps", t.steps.to_string());
        put("train.iterations", t.iterations.to_string());
        put("train.critic_lr", format!("{:?}", t.critic_lr));
        put("train.actor_lr", format!("{:?}", t.actor_lr));
        put("train.clip", format!("{:?}", t.clip));
        put("train.batch", t.batch.to_string());
        put("train.seed", t.seed.to_string());
        put("train.critic_baseline", t.critic_baseline.to_string());
        let n = &self.network;
        put("network.embed_width", n.embed_width.to_string());
        put("network.stem_width", n.stem_width.to_string());
        put("network.stem_blocks", n.stem_blocks.to_string());
        put("network.trunk_width", n.trunk_width.to_string());
        put("network.trunk_blocks", n.trunk_blocks.to_string());
        put("network.scale_actor_output", n.scale_actor_output.to_string());
        put("network.reference_params", n.reference_params.to_string());
        let e = &self.eval;
        put("eval.tasks", e.tasks.to_string());
        put("eval.families", join(&e.families.iter().map(family_text).collect::<Vec<_>>(), ","));
        put("eval.seeds", join(&e.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>(), ","));
        put("eval.deploy_k", join(&e.deploy_k.iter().map(|s| s.to_string()).collect::<Vec<_>>(), ","));
        put("eval.baseline_k", join(&e.baseline_k.iter().map(|s| s.to_string()).collect::<Vec<_>>(), ","));
        put("eval.dps_strength", format!("{:?}", e.dps_strength));
        let v = &self.verify;
        put("verify.value_shift", format!("{:?}", v.value_shift));
        put("verify.riccati_grid", format!("{:?}", v.riccati_grid));
        put("verify.mean_recovery", format!("{:?}", v.mean_recovery));
        put("verify.learned_rel", format!("{:?}", v.learned_rel));
        put("verify.running_cost_se", format!("{:?}", v.running_cost_se));
        put("verify.gradient_rel", format!("{:?}", v.gradient_rel));
        put("verify.probes", v.probes.to_string());
        put("verify.train_lq", v.train_lq.to_string());
        put("paths.out", self.paths.out.clone());
        put("paths.checkpoint", self.paths.checkpoint.clone());
        m
    }

    /// Hex SHA-256 of [`Self::to_canonical`], excluding the output paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection { out: String::new(), checkpoint: String::new() };
        let digest = Sha256::digest(c.to_canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_backbone(&self) -> Result<ScoreBackbone> {
        let b = &self.backbone;
        let means = if b.means.is_empty() { generated_means(b) } else { b.means.clone() };
        let k = b.components;
        ScoreBackbone::new(vec![1.0 / k as f64; k], means, vec![b.variance; k])
    }

    pub fn data_range(&self, backbone: &ScoreBackbone) -> f64 {
        self.task.data_range.unwrap_or_else(|| backbone.data_range())
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn weights(&self) -> TerminalWeights {
        TerminalWeights { alpha_vis: self.task.alpha_vis, alpha_hole: self.task.alpha_hole }
    }

    pub fn policy(&self) -> Result<PolicyConfig> {
        PolicyConfig::new(self.lambda, self.beta, self.backbone.dim)
    }

    fn sigma_data(&self) -> f64 {
        let b = &self.backbone;
        let means = if b.means.is_empty() { generated_means(b) } else { b.means.clone() };
        let k = b.components;
        ScoreBackbone::new(vec![1.0 / k as f64; k], means, vec![b.variance; k]).map_or(1.0, |bb| bb.data_std())
    }

    pub fn actor_spec(&self) -> NetSpec {
        let n = &self.network;
        NetSpec {
            embed_width: n.embed_width,
            stem_width: n.stem_width,
            stem_blocks: n.stem_blocks,
            trunk_width: n.trunk_width,
            trunk_blocks: n.trunk_blocks,
            scale_output: n.scale_actor_output,
            ..NetSpec::actor(self.backbone.dim, self.sigma_data())
        }
    }

    pub fn critic_spec(&self) -> NetSpec {
        NetSpec { head: crate::neural::HeadKind::Scalar, scale_output: false, ..self.actor_spec() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            iterations: self.train.iterations,
            critic_lr: self.train.critic_lr,
            actor_lr: self.train.actor_lr,
            clip_norm: self.train.clip,
            batch: self.train.batch,
            weights: self.weights(),
            family: self.task.family.clone(),
            shape: self.backbone.shape,
            seed: self.train.seed,
            log_wallclock: false,
            critic_baseline: self.train.critic_baseline,
        }
    }

    pub fn streams(&self) -> Streams {
        Streams::new(self.train.seed)
    }
}

const SECTIONS: [&str; 9] = ["backbone", "schedule", "task", "policy", "train", "network", "eval", "verify", "paths"];

/// Smooth images: each mean is a sum of a few low-frequency cosine modes, scaled
/// to `mean_scale` in max norm. One-dimensional backbones draw plain Gaussians.
fn generated_means(b: &BackboneSection) -> Vec<Vec<f64>> {
    let mut rng = Streams::new(b.seed).stream("backbone", &[]);
    let (h, w) = b.shape.unwrap_or((1, b.dim));
    (0..b.components)
        .map(|_| {
            let modes: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0..3) as f64,
                        rng.gen_range(0..3) as f64,
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let mut m: Vec<f64> = (0..h * w)
                .map(|p| {
                    let (r, c) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
                    modes.iter().map(|(fr, fc, ph, a)| a * (PI * (fr * r + fc * c) + ph).cos()).sum()
                })
                .collect();
            let peak = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
            m.iter_mut().for_each(|v| *v *= b.mean_scale / peak);
            m
        })
        .collect()
}

fn positive(key: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::config(key, format!("must be finite and positive, got {v}")));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(key, format!("cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got '{value}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>> {
    value.split(sep).map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_shape(key: &str, value: &str) -> Result<Option<(usize, usize)>> {
    if value == "none" {
        return Ok(None);
    }
    let (h, w) = value.split_once('x').ok_or_else(|| Error::config(key, "expected HxW or none"))?;
    Ok(Some((parse_num(key, h.trim())?, parse_num(key, w.trim())?)))
}

/// `freeform`, `center`, `strip`, or `fixed:1 1 0 0`.
fn parse_family(key: &str, value: &str, dim: usize) -> Result<MaskFamily> {
    if let Some(bits) = value.strip_prefix("fixed:") {
        let bits: Vec<f64> = parse_list(key, bits, ' ')?;
        if bits.len() != dim {
            return Err(Error::config(key, format!("fixed mask needs {dim} bits")));
        }
        return Mask::new(bits, None).map(MaskFamily::Fixed).map_err(|e| Error::config(key, e.to_string()));
    }
    value.parse().map_err(|e: Error| Error::config(key, e.to_string()))
}

fn family_text(f: &MaskFamily) -> String {
    match f {
        MaskFamily::Fixed(m) => {
            format!("fixed:{}", m.bits().iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(" "))
        }
        other => other.name().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_training_hyperparameters() {
        let c = RunConfig::image();
        assert_eq!((c.task.alpha_vis, c.task.alpha_hole, c.beta, c.lambda, c.train.steps), (2.0, 1.0, 1e-3, 1e-3, 18));
        assert_eq!(c.eval.seeds.len(), 3);
        assert_eq!(c.eval.deploy_k, vec![18, 12]);
        assert_eq!(c.eval.tasks, 200);
        c.validate().unwrap();
        RunConfig::lq().validate().unwrap();
    }

    #[test]
    fn canonical_round_trip() {
        for c in [RunConfig::image(), RunConfig::lq()] {
            let text = c.to_canonical();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let c = RunConfig::parse("mode = lq\n[policy]\nlambda = 2e-3\n# comment\n\n[train]\nseed = 9\n").unwrap();
        assert_eq!(c.mode, Mode::Lq);
        assert_eq!(c.lambda, 2e-3);
        assert_eq!(c.train.seed, 9);
        assert_ne!(c.hash(), RunConfig::lq().hash());
        let same_paths = RunConfig::parse("mode = lq\n[paths]\nout = elsewhere\n").unwrap();
        assert_eq!(same_paths.hash(), RunConfig::lq().hash());
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("[policy]\nbeta = -1\n", "policy.beta"),
            ("[train]\nbatch = two\n", "train.batch"),
            ("[train]\nwidth = 3\n", "train.width"),
            ("[bogus]\n", "bogus"),
            ("mode = video\n", "mode"),
            ("[task]\nfamily = center\n", "task.family"),
            ("[backbone]\nshape = 4x4\n", "backbone.shape"),
            ("[train]\nseed = 1\nseed = 2\n", "train.seed"),
        ];
        for (text, key) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::parse("[train\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\n\njunk\n"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn image_backbone_is_deterministic() {
        let c = RunConfig::image();
        let a = c.build_backbone().unwrap();
        let b = c.build_backbone().unwrap();
        assert_eq!(a.means(), b.means());
        assert_eq!(a.num_components(), 8);
        for m in a.means() {
            let peak = m.iter().fold(0.0f64, |x, v| x.max(v.abs()));
            assert!((peak - 1.0).abs() < 1e-12);
        }
        assert!(c.data_range(&a) > 0.0);
    }

    #[test]
    fn fixed_family_text() {
        let c = RunConfig::parse("mode = lq\n[task]\nfamily = fixed:1 0 1 0\n").unwrap();
        assert_eq!(c.task.family, MaskFamily::Fixed(Mask::new(vec![1.0, 0.0, 1.0, 0.0], None).unwrap()));
        assert!(RunConfig::parse("mode = lq\n[task]\nfamily = fixed:1 0\n").is_err());
    }

    #[test]
    fn specs_follow_network_section() {
        let c = RunConfig::parse("[network]\ntrunk_width = 32\nscale_actor_output = false\n").unwrap();
        assert_eq!(c.actor_spec().trunk_width, 32);
        assert!(!c.actor_spec().scale_output);
        assert!(!c.critic_spec().scale_output);
        assert_eq!(c.critic_spec().out_dim(), 1);
    }
}
