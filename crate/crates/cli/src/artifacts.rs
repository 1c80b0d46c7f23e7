//! Run directory layout and the manifest that ties outputs to configs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ens_core::{EnsError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    /// Latest invocation of each command.
    commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CommandRecord {
    config_hash: String,
    seed: u64,
    outputs: Vec<OutputRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OutputRecord {
    path: String,
    sha256: String,
}

/// A run directory plus the config every command in it reads.
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&out)?;
        let hash = cfg.hash();
        // content-addressed, so rewriting it is harmless
        let dir = out.join("configs");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{hash}.json")), serde_json::to_string_pretty(&cfg)? + "\n")?;
        Ok(Run {
            cfg,
            hash,
            out,
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Fails with a hint naming the command that produces `rel`.
    pub fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(EnsError::Config(format!("{} is missing; run `ens {producer}` first", p.display())))
        }
    }

    /// Marks a file (or every file under a directory) as produced.
    pub fn produced(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Writes `value` as pretty JSON with a `config_hash` field added.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("config_hash".into(), serde_json::Value::String(self.hash.clone()));
        }
        self.write_text(rel, &(serde_json::to_string_pretty(&v)? + "\n"))
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, text)?;
        self.produced(p.clone());
        Ok(p)
    }

    /// Records this command's outputs, with their digests, in `manifest.json`.
    pub fn finish(self, command: &str) -> Result<()> {
        let path = self.out.join("manifest.json");
        let mut manifest: Manifest = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        manifest.version = MANIFEST_VERSION;
        let mut files = Vec::new();
        for p in &self.outputs {
            collect_files(p, &mut files)?;
        }
        files.sort();
        files.dedup();
        let outputs = files
            .iter()
            .map(|f| {
                Ok(OutputRecord {
                    path: f.strip_prefix(&self.out).unwrap_or(f).to_string_lossy().replace('\\', "/"),
                    sha256: hex::encode(Sha256::digest(fs::read(f)?)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        manifest.commands.insert(
            command.to_string(),
            CommandRecord {
                config_hash: self.hash.clone(),
                seed: self.cfg.seed,
                outputs,
            },
        );
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for entry in fs::read_dir(p)? {
            collect_files(&entry?.path(), out)?;
        }
    } else if p.is_file() {
        out.push(p.to_path_buf());
    }
    Ok(())
}
