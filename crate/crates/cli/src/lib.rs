//! Commands behind the `aid` binary: train, eval, verify, sweep and plot.

pub mod eval;
pub mod plot;
pub mod sweep;
pub mod train;
pub mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use aid_core::config::RunConfig;
use anyhow::{Context, Result};

/// Output locations after applying command-line overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunPaths {
    pub fn resolve(cfg: &RunConfig, out: Option<&Path>, checkpoint: Option<&Path>) -> Self {
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
        let checkpoint = match checkpoint {
            Some(p) => p.to_path_buf(),
            None if cfg.paths.checkpoint.is_empty() => out.join("checkpoint.bin"),
            None => PathBuf::from(&cfg.paths.checkpoint),
        };
        Self { out, checkpoint }
    }

    /// Paths for a run nested under `out/name`.
    pub fn nested(&self, name: &str) -> Self {
        let out = self.out.join(name);
        Self { checkpoint: out.join("checkpoint.bin"), out }
    }

    /// Manifest written next to the checkpoint.
    pub fn manifest(&self) -> PathBuf {
        self.checkpoint.with_extension("manifest")
    }
}

/// Reads and validates a config file, then applies the seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Maps `f` over `items` on up to `jobs` threads. Results keep input order,
/// so output never depends on the thread count.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_for_any_job_count() {
        let items: Vec<u64> = (0..37).collect();
        let serial = par_map(&items, 1, |x| x * x);
        for jobs in [2, 3, 8, 100] {
            assert_eq!(par_map(&items, jobs, |x| x * x), serial);
        }
        assert!(par_map(&[] as &[u64], 4, |x| *x).is_empty());
    }

    #[test]
    fn paths_resolve_defaults_and_overrides() {
        let cfg = RunConfig::image();
        let p = RunPaths::resolve(&cfg, None, None);
        assert_eq!(p.out, PathBuf::from("out"));
        assert_eq!(p.checkpoint, PathBuf::from("out/checkpoint.bin"));
        assert_eq!(p.manifest(), PathBuf::from("out/checkpoint.manifest"));
        let q = RunPaths::resolve(&cfg, Some(Path::new("x")), Some(Path::new("y/m.bin")));
        assert_eq!((q.out, q.checkpoint), (PathBuf::from("x"), PathBuf::from("y/m.bin")));
        assert_eq!(p.nested("a").checkpoint, PathBuf::from("out/a/checkpoint.bin"));
    }
}
