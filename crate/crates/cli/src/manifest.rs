use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

pub fn code_version() -> String {
    option_env!("QUADLAB_GIT_DESCRIBE")
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix_s: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub run_id: String,
    pub stage: String,
    pub code_version: String,
    pub seed: u64,
    pub input_checkpoints: Vec<PathBuf>,
    pub output_checkpoints: Vec<PathBuf>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<PathBuf>,
    pub timings: Timings,
    pub config: LabConfig,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing manifest: {e}")))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Write-once run directory: `manifest.toml`, `checkpoints/`, `logs/`,
/// `eval/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        if root.exists() && std::fs::read_dir(root)?.next().is_some() {
            return Err(CliError::Config(format!(
                "run directory {} already exists and is not empty",
                root.display()
            )));
        }
        for sub in ["checkpoints", "logs", "eval"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            manifest_version: MANIFEST_VERSION,
            run_id: "a".into(),
            stage: "imitate".into(),
            code_version: code_version(),
            seed: 3,
            input_checkpoints: vec![],
            output_checkpoints: vec!["checkpoints/policy.lfnn".into()],
            artifacts: vec!["logs/dagger.csv".into()],
            timings: Timings {
                started_unix_s: 1.5,
                wall_seconds: 2.0,
            },
            config: LabConfig::default(),
        };
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn run_dir_is_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("r");
        RunDir::create(&root).unwrap();
        std::fs::write(root.join("x"), "1").unwrap();
        assert!(matches!(RunDir::create(&root), Err(CliError::Config(_))));
    }
}
