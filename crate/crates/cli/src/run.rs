//! Run directories and their MANIFEST.
//!
//! A run lives at `<out>/<timestamp>-<hash prefix>/`. Commands sharing a config
//! find the same directory through the hash suffix; `config.txt` inside holds
//! the canonical config that created it.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use advdial::train::{metrics_to_jsonl, parse_metrics_jsonl};
use advdial::Error;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use walkdir::WalkDir;

pub const MANIFEST: &str = "MANIFEST";
pub const CONFIG_FILE: &str = "config.txt";
pub const HASH_PREFIX_LEN: usize = 12;

fn io(path: &Path, source: std::io::Error) -> CliError {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
}

impl RunDir {
    /// Locates the run directory for `cfg`. An explicit directory must exist and
    /// match the config hash. Otherwise the newest `<out>/*-<prefix>` is used,
    /// or a fresh one is created when `create` is set.
    pub fn resolve(cfg: &RunConfig, explicit: Option<&Path>, create: bool) -> CliResult<Self> {
        let hash = cfg.hash();
        if let Some(dir) = explicit {
            return Self::open(dir, &hash);
        }
        let out = cfg.out_dir();
        let suffix = format!("-{}", &hash[..HASH_PREFIX_LEN]);
        let mut found: Vec<PathBuf> = match std::fs::read_dir(&out) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.is_dir()
                        && p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.ends_with(&suffix))
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        found.sort();
        if let Some(dir) = found.pop() {
            return Self::open(&dir, &hash);
        }
        if !create {
            return Err(Error::MissingArtifact(out.join(format!("*{suffix}"))).into());
        }
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let path = out.join(format!("{stamp}{suffix}"));
        std::fs::create_dir_all(&path).map_err(|e| io(&path, e))?;
        let run = Self {
            path,
            config_hash: hash,
        };
        run.write(CONFIG_FILE, cfg.canonical().as_bytes())?;
        Ok(run)
    }

    fn open(dir: &Path, hash: &str) -> CliResult<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let stored = RunConfig::load(&cfg_path)?;
        let found = stored.hash();
        if found != hash {
            return Err(CliError::RunMismatch {
                dir: dir.display().to_string(),
                expected: hash.to_string(),
                found,
            });
        }
        Ok(Self {
            path: dir.to_path_buf(),
            config_hash: hash.to_string(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    /// Rewrites MANIFEST from the current directory contents.
    pub fn refresh_manifest(&self) -> CliResult<String> {
        let text = build_manifest(&self.path)?;
        self.write(MANIFEST, text.as_bytes())?;
        Ok(text)
    }
}

/// SHA-256 of an artifact. Metrics logs are hashed with `wall_ms` zeroed so
/// that reruns compare equal.
pub fn content_hash(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    let is_metrics = path.extension().is_some_and(|e| e == "jsonl");
    let hashed = if is_metrics {
        let text = String::from_utf8_lossy(&bytes);
        let mut records = parse_metrics_jsonl(&text)?;
        for r in &mut records {
            r.wall_ms = 0;
        }
        metrics_to_jsonl(&records)?.into_bytes()
    } else {
        bytes
    };
    Ok(hex::encode(Sha256::digest(&hashed)))
}

/// Every file below `dir` except MANIFEST itself, as relative paths with `/` separators.
pub fn artifacts(dir: &Path) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| io(dir, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walkdir stays below its root");
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if name != MANIFEST {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// `<sha256>  <relative path>` per artifact, sorted by path.
pub fn build_manifest(dir: &Path) -> CliResult<String> {
    let mut out = String::new();
    for name in artifacts(dir)? {
        out.push_str(&format!("{}  {}\n", content_hash(&dir.join(&name))?, name));
    }
    Ok(out)
}

/// Checks a MANIFEST against the files next to it; returns a list of problems.
pub fn verify_manifest(path: &Path) -> CliResult<Vec<String>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut problems = Vec::new();
    let mut listed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some((hash, name)) = line.split_once("  ") else {
            problems.push(format!("line {}: expected `<hash>  <path>`", i + 1));
            continue;
        };
        listed.push(name.to_string());
        let file = dir.join(name);
        if !file.is_file() {
            problems.push(format!("{name}: listed but missing"));
        } else if content_hash(&file)? != hash {
            problems.push(format!("{name}: content hash differs"));
        }
    }
    for name in artifacts(dir)? {
        if !listed.contains(&name) {
            problems.push(format!("{name}: present but not listed"));
        }
    }
    Ok(problems)
}
