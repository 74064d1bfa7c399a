use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const ARTIFACT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> carpetlab::Result<Manifest> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// The only path by which a run touches the output directory.
pub struct Writer {
    dir: PathBuf,
    outputs: Vec<OutputEntry>,
}

impl Writer {
    pub fn new(dir: &Path) -> std::io::Result<Writer> {
        fs::create_dir_all(dir)?;
        Ok(Writer { dir: dir.to_path_buf(), outputs: Vec::new() })
    }

    pub fn put(&mut self, file: &str, bytes: &[u8]) -> carpetlab::Result<()> {
        write_atomic(&self.dir.join(file), bytes)?;
        self.outputs.retain(|o| o.file != file);
        self.outputs.push(OutputEntry { file: file.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn put_json<T: Serialize>(&mut self, file: &str, value: &T) -> carpetlab::Result<()> {
        let mut s = serde_json::to_vec_pretty(value)?;
        s.push(b'\n');
        self.put(file, &s)
    }

    pub fn put_with(
        &mut self,
        file: &str,
        f: impl FnOnce(&mut Vec<u8>) -> carpetlab::Result<()>,
    ) -> carpetlab::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.put(file, &buf)
    }

    pub fn finish(self, config: &ExperimentConfig) -> carpetlab::Result<Manifest> {
        let manifest = Manifest {
            artifact_version: ARTIFACT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            outputs: self.outputs,
        };
        let mut s = serde_json::to_vec_pretty(&manifest)?;
        s.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST), &s)?;
        Ok(manifest)
    }
}
