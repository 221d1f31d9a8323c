//! Artifact writers: CSV tables, binary grids with JSON sidecars and the
//! run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Seventeen significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.header.len());
        self.rows.push(values.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }
}

/// Reads a numeric CSV with one header line.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}: not a number", path.display(), i + 2))?;
        if row.len() != header.len() {
            bail!(
                "{}:{}: expected {} columns, got {}",
                path.display(),
                i + 2,
                header.len(),
                row.len()
            );
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Sidecar of a binary grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub shape: Vec<usize>,
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub field_name: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub metadata: Value,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `data` as little-endian f64 in row-major order plus its sidecar.
pub fn write_grid(bin: &Path, data: &ArrayD<f64>, sidecar: &GridSidecar) -> Result<()> {
    if sidecar.shape != data.shape() {
        bail!(
            "sidecar shape {:?} does not match data {:?}",
            sidecar.shape,
            data.shape()
        );
    }
    let mut bytes = Vec::with_capacity(8 * data.len());
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin, bytes).with_context(|| format!("writing {}", bin.display()))?;
    write_json(&sidecar_path(bin), sidecar)
}

pub fn read_grid(bin: &Path) -> Result<(ArrayD<f64>, GridSidecar)> {
    let side = sidecar_path(bin);
    let sidecar: GridSidecar = serde_json::from_str(
        &fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?,
    )
    .with_context(|| format!("parsing {}", side.display()))?;
    let bytes = fs::read(bin).with_context(|| format!("reading {}", bin.display()))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != 8 * n {
        bail!(
            "{}: expected {} bytes for shape {:?}, found {}",
            bin.display(),
            8 * n,
            sidecar.shape,
            bytes.len()
        );
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = ArrayD::from_shape_vec(IxDyn(&sidecar.shape), values)?;
    Ok((data, sidecar))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub inputs: Vec<FileEntry>,
    pub files: Vec<FileEntry>,
    pub summary: Value,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn entry(path: &Path, shown: String) -> Result<FileEntry> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileEntry {
        path: shown,
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            collect(&p, root, out)?;
        } else if !(p.parent() == Some(root) && p.file_name().is_some_and(|n| n == MANIFEST_NAME)) {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except the manifest itself) and writes the manifest.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    inputs: &[&Path],
    summary: Value,
) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect(dir, dir, &mut paths)?;
    paths.sort();
    let files = paths
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            entry(p, rel.to_string_lossy().replace('\\', "/"))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = inputs
        .iter()
        .map(|p| {
            entry(
                p,
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.to_string(),
        inputs,
        files,
        summary,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}
