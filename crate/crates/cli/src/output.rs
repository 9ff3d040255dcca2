use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use crate::config::Manifest;

/// Output directory plus the list of artifacts written so far.
pub struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes a CSV built by `fill`.
    pub fn write_csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            fill(&mut w)?;
            w.flush()?;
        }
        self.write(name, &buf)
    }

    /// Records a file written by someone else (e.g. a checkpoint).
    pub fn register(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    pub fn finish(mut self, subcommand: &str, seed: u64, config: serde_json::Value) -> anyhow::Result<()> {
        self.artifacts.sort();
        let manifest = Manifest {
            tool: "routelab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            format_version: routelab::FORMAT_VERSION,
            subcommand: subcommand.into(),
            seed,
            config,
            artifacts: self.artifacts.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path("manifest.json"), text)?;
        Ok(())
    }
}
