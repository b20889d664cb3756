use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written when the command starts and
/// rewritten when it ends.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the version string, hex encoded.
    pub build_hash: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn version_hash(version: &str) -> String {
    Sha256::digest(version.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunManifest {
    /// Creates `<dir>/<command>.manifest.json` with status `running`.
    pub fn start(
        dir: &Path,
        command: &str,
        seed: Option<u64>,
        config: serde_json::Value,
    ) -> std::io::Result<Self> {
        let version = format!("rda {}", env!("CARGO_PKG_VERSION"));
        std::fs::create_dir_all(dir)?;
        let m = Self {
            command: command.to_string(),
            build_hash: version_hash(&version),
            version,
            seed,
            config,
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            outputs: Vec::new(),
            path: dir.join(format!("{command}.manifest.json")),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> std::io::Result<()> {
        let tmp = self.path.with_extension("json.tmp");
        std::fs::write(
            &tmp,
            serde_json::to_string_pretty(self).expect("manifest serialises"),
        )?;
        std::fs::rename(&tmp, &self.path)
    }

    pub fn finish(mut self, status: &str, outputs: Vec<PathBuf>) -> std::io::Result<()> {
        self.finished_unix = Some(now());
        self.status = status.to_string();
        self.outputs = outputs;
        self.write()
    }
}
