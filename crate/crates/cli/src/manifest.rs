//! Run manifests: enough to re-execute a command and confirm its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, EXIT_DATA, EXIT_IO};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Flags whose values are output locations.
    pub output_flags: Vec<String>,
    /// Directory relative paths in `args` resolve against.
    pub cwd: PathBuf,
    /// Resolved `key = value` configuration, when the command has one.
    pub config: Option<String>,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

/// Digests of `paths`, expanding directories to their files (sorted).
pub fn digest_all(paths: &[PathBuf]) -> CliResult<Vec<FileDigest>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| io_error(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    files
        .into_iter()
        .map(|path| {
            Ok(FileDigest {
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect()
}

impl Manifest {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new(EXIT_DATA, format!("{}: bad manifest: {e}", path.display())))
    }

    /// Output flag values as recorded.
    fn output_values(&self) -> Vec<PathBuf> {
        let mut values = Vec::new();
        let mut args = self.args.iter();
        while let Some(a) = args.next() {
            for flag in &self.output_flags {
                if a == flag {
                    if let Some(v) = args.clone().next() {
                        values.push(PathBuf::from(v));
                    }
                } else if let Some(v) = a.strip_prefix(&format!("{flag}=")) {
                    values.push(PathBuf::from(v));
                }
            }
        }
        values
    }

    /// Arguments with every output flag value moved into `out_dir`.
    pub fn remapped_args(&self, out_dir: &Path) -> Vec<String> {
        let moved = |v: &str| -> String {
            let name = Path::new(v)
                .file_name()
                .map(PathBuf::from)
                .unwrap_or_default();
            out_dir.join(name).to_string_lossy().into_owned()
        };
        let mut out = Vec::with_capacity(self.args.len());
        let mut i = 0;
        while i < self.args.len() {
            let a = &self.args[i];
            out.push(a.clone());
            if self.output_flags.contains(a) && i + 1 < self.args.len() {
                out.push(moved(&self.args[i + 1]));
                i += 1;
            } else if let Some(flag) = self
                .output_flags
                .iter()
                .find(|f| a.starts_with(&format!("{f}=")))
            {
                let v = &a[flag.len() + 1..];
                *out.last_mut().expect("just pushed") = format!("{flag}={}", moved(v));
            }
            i += 1;
        }
        out
    }

    /// Where a recorded output lands after [`remapped_args`](Self::remapped_args).
    pub fn remapped_output(&self, recorded: &Path, out_dir: &Path) -> Option<PathBuf> {
        for value in self.output_values() {
            let base = value.parent().unwrap_or(Path::new(""));
            let related = recorded == value
                || recorded.starts_with(&value)
                || (recorded.parent() == value.parent()
                    && recorded
                        .file_name()
                        .zip(value.file_name())
                        .is_some_and(|(r, v)| {
                            r.to_string_lossy().starts_with(&*v.to_string_lossy())
                        }));
            if related {
                if let Ok(rel) = recorded.strip_prefix(base) {
                    return Some(out_dir.join(rel));
                }
            }
        }
        None
    }
}
