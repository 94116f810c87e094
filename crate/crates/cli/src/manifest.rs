use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use s3c::config::KeyValues;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const BACKBONE_FILE: &str = "backbone.s3cb";
pub const HEAD_FILE: &str = "head.s3ch";
pub const PROTOTYPES_FILE: &str = "prototypes.s3cp";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Complete,
    Failed,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::Complete => "complete",
            Status::Failed => "failed",
        }
    }
}

/// What a run directory contains and how it was produced.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset: PathBuf,
    pub dataset_hash: String,
    pub sessions_planned: usize,
    pub sessions_completed: usize,
    pub status: Status,
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Manifest values live on one line and may not contain the comment marker.
fn clean(s: &str) -> String {
    s.replace(['\n', '\r'], " ").replace('#', "%23")
}

impl RunManifest {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("tool_version", env!("CARGO_PKG_VERSION"));
        kv.set("command", clean(&self.command));
        kv.set("seed", self.seed);
        kv.set("config_hash", &self.config_hash);
        kv.set("config", CONFIG_FILE);
        kv.set("dataset", clean(&self.dataset.display().to_string()));
        kv.set("dataset_hash", &self.dataset_hash);
        kv.set("metrics", METRICS_FILE);
        kv.set("loss_log", LOSS_FILE);
        kv.set(
            "checkpoints",
            [BACKBONE_FILE, HEAD_FILE, PROTOTYPES_FILE].join(","),
        );
        kv.set("sessions_planned", self.sessions_planned);
        kv.set("sessions_completed", self.sessions_completed);
        kv.set("status", self.status.as_str());
        if let Some(e) = &self.error {
            kv.set("error", clean(e));
        }
        kv
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_kv().render())
    }
}
