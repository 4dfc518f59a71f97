use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use wisteria::{Error, Result};

use crate::settings::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED: &str = "config.resolved";

/// A prepared output directory. Refuses a non-empty directory unless forced.
pub struct OutDir {
    pub path: PathBuf,
}

impl OutDir {
    pub fn prepare(path: &Path, force: bool, reuse: bool) -> Result<OutDir> {
        let busy = fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false);
        if busy && !force && !reuse {
            return Err(Error::Usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                path.display()
            )));
        }
        fs::create_dir_all(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(OutDir { path: path.to_path_buf() })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.join(name);
        fs::write(&p, text).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        Ok(p)
    }

    /// Record the resolved config and a manifest of the run's artifacts.
    pub fn finish(&self, command: &str, rc: &RunConfig, artifacts: &[PathBuf]) -> Result<()> {
        self.write(RESOLVED, &rc.render())?;
        let names: Vec<String> = artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.path).unwrap_or(p).display().to_string())
            .collect();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": rc.seed,
            "config": RESOLVED,
            "artifacts": names,
        });
        self.write(MANIFEST, &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("plain json")))?;
        Ok(())
    }
}
