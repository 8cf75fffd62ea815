//! `run.manifest`: resolved config, seeds, input hashes and artifact hashes
//! of one command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trilandmark::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run.manifest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seeds: Seeds,
    pub inputs: Vec<FileHash>,
    /// Every file the command wrote under the output directory except the
    /// manifest itself, sorted by path.
    pub artifacts: Vec<FileHash>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub cohort: u64,
    pub train: u64,
    pub classify: u64,
    pub eval_triplets: u64,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::InvalidInput(format!("{}: {e}", path.display()))
}

/// Files under `dir`, recursively, sorted by relative path.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| io(&d, e))? {
            let p = entry.map_err(|e| io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of a file, or of a directory as the sorted list of its relative
/// paths and file hashes.
pub fn hash_input(path: &Path) -> Result<FileHash> {
    let sha256 = if path.is_dir() {
        let mut h = Sha256::new();
        for f in list_files(path)? {
            let rel = f.strip_prefix(path).expect("listed under dir");
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(hash_file(&f)?.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    } else {
        hash_file(path)?
    };
    Ok(FileHash {
        path: path.display().to_string(),
        sha256,
    })
}

impl RunManifest {
    /// Hash `inputs` and everything currently under `out` and write the
    /// manifest there.
    pub fn write(command: &str, config: &RunConfig, inputs: &[&Path], out: &Path) -> Result<Self> {
        let mut artifacts = Vec::new();
        for f in list_files(out)? {
            let rel = f.strip_prefix(out).expect("listed under out");
            if rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            artifacts.push(FileHash {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: hash_file(&f)?,
            });
        }
        let m = Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seeds: Seeds {
                cohort: config.cohort.seed,
                train: config.train.seed,
                classify: config.classify.seed,
                eval_triplets: config.eval.triplet_seed,
            },
            inputs: inputs.iter().map(|p| hash_input(p)).collect::<Result<_>>()?,
            artifacts,
            config: config.clone(),
        };
        let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn artifact(&self, path: &str) -> Option<&str> {
        self.artifacts.iter().find(|a| a.path == path).map(|a| a.sha256.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_hash_covers_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a.txt"), "1").unwrap();
        std::fs::create_dir(d.path().join("sub")).unwrap();
        std::fs::write(d.path().join("sub/b.txt"), "2").unwrap();
        let h1 = hash_input(d.path()).unwrap().sha256;
        assert_eq!(h1, hash_input(d.path()).unwrap().sha256);
        std::fs::write(d.path().join("sub/b.txt"), "3").unwrap();
        let h2 = hash_input(d.path()).unwrap().sha256;
        assert_ne!(h1, h2);
        std::fs::rename(d.path().join("a.txt"), d.path().join("c.txt")).unwrap();
        assert_ne!(h2, hash_input(d.path()).unwrap().sha256);
    }

    #[test]
    fn manifest_lists_artifacts_and_round_trips() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("x.csv"), "a,b\n").unwrap();
        std::fs::create_dir(d.path().join("ck")).unwrap();
        std::fs::write(d.path().join("ck/w.ltf"), [1u8, 2]).unwrap();
        let m = RunManifest::write("test", &RunConfig::default(), &[], d.path()).unwrap();
        let paths: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["ck/w.ltf", "x.csv"]);
        // Rewriting does not pick up the manifest itself.
        let again = RunManifest::write("test", &RunConfig::default(), &[], d.path()).unwrap();
        assert_eq!(again, m);
        assert_eq!(RunManifest::read(&d.path().join(MANIFEST_FILE)).unwrap(), m);
        assert_eq!(m.artifact("x.csv"), Some(hash_file(&d.path().join("x.csv")).unwrap().as_str()));
    }
}
