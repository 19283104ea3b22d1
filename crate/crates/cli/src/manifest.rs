use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kws_core::kv::KvFile;

/// Where a resolved setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Flag,
    Config,
    Default,
}

impl Origin {
    pub fn of(flag: bool, config: bool) -> Self {
        match (flag, config) {
            (true, _) => Origin::Flag,
            (false, true) => Origin::Config,
            _ => Origin::Default,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Origin::Flag => "flag",
            Origin::Config => "config",
            Origin::Default => "default",
        }
    }
}

/// Resolved settings and output layout of one command, written before any
/// other output.
#[derive(Debug, Clone)]
pub struct RunManifest {
    kv: KvFile,
}

pub fn build_id() -> String {
    format!("kws {} ({})", env!("CARGO_PKG_VERSION"), env!("KWS_GIT_REV"))
}

impl RunManifest {
    pub fn new(command: &str, out_dir: &Path) -> Self {
        let mut kv = KvFile::new();
        kv.set("command", command);
        kv.set("build", build_id());
        kv.set("out_dir", out_dir.display());
        RunManifest { kv }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.kv.set("seed", seed);
        self
    }

    pub fn setting(&mut self, key: &str, value: impl ToString, origin: Origin) -> &mut Self {
        self.kv.set(&format!("config.{key}"), value);
        self.kv.set(&format!("source.{key}"), origin.as_str());
        self
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.kv.set(&format!("input.{key}"), path.display());
        self
    }

    pub fn output(&mut self, key: &str, file: impl AsRef<Path>) -> &mut Self {
        self.kv.set(&format!("layout.{key}"), file.as_ref().display());
        self
    }

    /// Creates the parent directory and writes the manifest to `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        self.kv.write(path)?;
        Ok(())
    }
}

/// `features.csv` → `features.run.txt`
pub fn beside(out: &Path) -> PathBuf {
    out.with_extension("run.txt")
}

pub const RUN_FILE: &str = "run.txt";
