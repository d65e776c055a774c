//! Output directories: an exclusive lock while a command runs, and a manifest afterwards.

use std::fs::{self, File, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration text.
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_ms: u128,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn sha256_text(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// Every regular file under `path` (or `path` itself), sorted.
fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// An output directory held for the lifetime of one command.
pub struct RunDir {
    pub dir: PathBuf,
    started: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    /// Creates `dir` and takes its lock; a second concurrent run on the same directory fails.
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let lock = dir.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::new(
                    "E_LOCKED",
                    format!("{} is in use by another run (remove {} if it is stale)", dir.display(), lock.display()),
                ),
                _ => CliError::io(&lock, e),
            })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records an input file, or every file of an input directory.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::new("E_MISSING", format!("input {} does not exist", path.display())));
        }
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        for f in files {
            self.inputs.push(FileDigest {
                path: f.display().to_string(),
                sha256: sha256_file(&f)?,
            });
        }
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        retrolite::codec::write_atomic(&p, bytes)?;
        self.output(p.clone());
        Ok(p)
    }

    pub fn finish(mut self, command: &str, config_text: &str, seed: u64) -> Result<(), CliError> {
        let mut outputs = Vec::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.dir).unwrap_or(p);
            outputs.push(FileDigest {
                path: rel.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: sha256_text(config_text),
            seed,
            inputs: std::mem::take(&mut self.inputs),
            outputs,
            wall_ms: self.started.elapsed().as_millis(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        retrolite::codec::write_atomic(&self.dir.join(MANIFEST), json.as_bytes())?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK));
    }
}
