//! `run.json`: what a command read, what it wrote, and how it was configured.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const RUN_FILE: &str = "run.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub toolkit_version: &'static str,
    pub git_describe: &'static str,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<InputFile>,
    /// Files written into the output directory, including `run.json`.
    pub outputs: Vec<String>,
    pub summary: Value,
}

pub fn hash_file(path: &Path) -> Result<InputFile, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: format!("{:x}", Sha256::digest(&bytes)),
    })
}

/// Tracks the output directory and every file written into it.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file some other writer already produced.
    pub fn record(&mut self, name: impl Into<String>) {
        self.files.push(name.into());
    }

    pub fn write(&mut self, name: &str, body: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", p.display())))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let body = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))? + "\n";
        self.write(name, body)
    }

    pub fn finish(
        mut self,
        command: &str,
        seed: Option<u64>,
        config: Value,
        inputs: Vec<InputFile>,
        summary: Value,
    ) -> Result<(), Failure> {
        self.files.push(RUN_FILE.into());
        let run = RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            toolkit_version: env!("CARGO_PKG_VERSION"),
            git_describe: env!("BCREC_GIT_DESCRIBE"),
            seed,
            config,
            inputs,
            outputs: self.files.clone(),
            summary,
        };
        let body = serde_json::to_string_pretty(&run).map_err(|e| Failure::runtime(e.to_string()))? + "\n";
        let p = self.path(RUN_FILE);
        fs::write(&p, body).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", p.display())))
    }
}
