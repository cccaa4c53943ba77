//! Artifact sink: per-seed directories plus top-level aggregates, every CSV
//! stamped with the config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use teachnet::csvio::MetaLine;

/// Where an experiment writes. `None` runs the pipeline without touching disk.
#[derive(Debug, Clone)]
pub struct Sink {
    dir: Option<PathBuf>,
    config_hash: String,
    experiment: String,
}

impl Sink {
    pub fn new(dir: Option<PathBuf>, config_hash: &str, experiment: &str) -> Self {
        Sink {
            dir,
            config_hash: config_hash.to_string(),
            experiment: experiment.to_string(),
        }
    }

    pub fn discard() -> Self {
        Sink::new(None, "none", "none")
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn meta(&self, kind: &str, seed: Option<u64>) -> MetaLine {
        let m = MetaLine::new(kind)
            .with("config_hash", &self.config_hash)
            .with("experiment", &self.experiment);
        match seed {
            Some(s) => m.with("seed", s),
            None => m.with("seed", "all"),
        }
    }

    fn path(&self, seed: Option<u64>, name: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        Some(match seed {
            Some(s) => dir.join(format!("seed-{s}")).join(name),
            None => dir.join(name),
        })
    }

    /// Writes `content` under the seed directory (or the top level); the
    /// content is only rendered when there is somewhere to put it.
    pub fn write(&self, seed: Option<u64>, name: &str, content: impl FnOnce(&MetaLine) -> Result<String>) -> Result<()> {
        let Some(path) = self.path(seed, name) else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let kind = name.rsplit_once('.').map_or(name, |(stem, _)| stem);
        let text = content(&self.meta(kind, seed))?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Marks the output directory as incomplete after a failure.
    pub fn flag_partial(&self, reason: &str) {
        if let Some(dir) = &self.dir {
            let _ = fs::create_dir_all(dir);
            let _ = fs::write(dir.join("INCOMPLETE"), format!("{reason}\n"));
        }
    }

    pub fn clear_partial(&self) {
        if let Some(dir) = &self.dir {
            let _ = fs::remove_file(dir.join("INCOMPLETE"));
        }
    }
}

pub fn opt(v: Option<impl ToString>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}
