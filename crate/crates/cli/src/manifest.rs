//! Artifact workspace: every file a command produces is recorded with its
//! SHA-256, and the manifest is written last so a crashed command leaves
//! no manifest behind.

use std::fs;
use std::path::{Path, PathBuf};

use profitlab::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    artifacts: &'a [Artifact],
}

pub struct Workspace {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Workspace {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Write `contents` under the workspace and record the artifact.
    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents.as_ref())?;
        self.record(rel, contents.as_ref());
        Ok(())
    }

    /// Record a file a library call already wrote under the workspace.
    pub fn track(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.root.join(rel))?;
        self.record(rel, &bytes);
        Ok(())
    }

    fn record(&mut self, rel: &str, contents: &[u8]) {
        let digest = Sha256::digest(contents);
        let sha256: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            bytes: contents.len() as u64,
            sha256,
        });
    }

    /// Write manifest.json listing every recorded artifact.
    pub fn finish(mut self, command: &str, config: serde_json::Value) -> Result<()> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        if let Some(w) = self.artifacts.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(Error::Contract(format!(
                "artifact `{}` recorded twice",
                w[0].path
            )));
        }
        let manifest = Manifest {
            command,
            config,
            artifacts: &self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}
