//! Artifact writing and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use sparse_teacher::checkpoint::Checkpoint;
use sparse_teacher::config::RunConfig;
use sparse_teacher::pipeline::seeds;
use sparse_teacher::rng::SeedLedger;
use sparse_teacher::tasks::{Dataset, Vocab};
use sparse_teacher::Error;

use crate::Outcome;

/// Everything needed to reconstruct an invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: RunConfig,
    pub config_digest: String,
    /// Digest stamped into the checkpoints this run writes.
    pub distill_digest: String,
    pub seeds: SeedLedger,
    /// Paths relative to the output directory, in write order.
    pub artifacts: Vec<String>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

pub struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Outputs {
    pub fn create(dir: &Path, command: &str, cfg: &RunConfig) -> Outcome<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut ledger = SeedLedger::new(cfg.seed);
        for name in [seeds::TEACHER_INIT, seeds::TEACHER_SHUFFLE, seeds::DISTILL_SHUFFLE] {
            ledger.seed(name);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config: cfg.clone(),
                config_digest: cfg.digest()?,
                distill_digest: cfg.distill_digest()?,
                seeds: ledger,
                artifacts: Vec::new(),
                timings: BTreeMap::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn seed(&mut self, name: &str) {
        self.manifest.seeds.seed(name);
    }

    pub fn time(&mut self, stage: &str, d: Duration) {
        self.manifest.timings.insert(stage.to_string(), d.as_secs_f64());
    }

    pub fn subdir(&self, name: &str) -> Outcome<PathBuf> {
        let p = self.dir.join(name);
        std::fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        Ok(p)
    }

    /// Notes a file written by someone else.
    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        let rel = rel.to_string_lossy().into_owned();
        if !self.manifest.artifacts.contains(&rel) {
            self.manifest.artifacts.push(rel);
        }
    }

    fn target(&mut self, rel: &str) -> Outcome<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        self.record(&p);
        Ok(p)
    }

    pub fn text(&mut self, rel: &str, body: &str) -> Outcome<()> {
        let p = self.target(rel)?;
        std::fs::write(&p, body).map_err(|e| io(&p, e))?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Outcome<()> {
        let body = serde_json::to_string_pretty(value).map_err(Error::from)?;
        self.text(rel, &body)
    }

    pub fn checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Outcome<()> {
        let p = self.target(rel)?;
        ck.save(&p)?;
        Ok(())
    }

    pub fn tsv(&mut self, rel: &str, data: &Dataset, vocab: &Vocab) -> Outcome<()> {
        let p = self.target(rel)?;
        data.write_tsv(vocab, &p)?;
        Ok(())
    }

    /// Writes `manifest-<command>.json`.
    pub fn finish(self) -> Outcome<()> {
        let p = self.dir.join(format!("manifest-{}.json", self.manifest.command));
        let body = serde_json::to_string_pretty(&self.manifest).map_err(Error::from)?;
        std::fs::write(&p, body).map_err(|e| io(&p, e))?;
        Ok(())
    }
}
