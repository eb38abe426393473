//! `run_manifest.json`: what ran, with which inputs, when.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Version string of the source tree this binary was built from.
pub const GIT_DESCRIBE: &str = env!("PPGCONV_GIT_DESCRIBE");

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: i32,
    pub error: Option<String>,
}

pub fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }
}
