//! Artifact files: every CSV/JSON a run writes goes through [`ArtifactSet`],
//! which records it for the manifest and can roll the run back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Snapshot,
    MetricSeries,
    Diagnostics,
    Histogram,
    Histogram2d,
    ReferenceDensity,
    RateFit,
    Summary,
    Certificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    #[serde(default)]
    pub rows: usize,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    /// Metric name for series and rate fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header plus serialized rows, in memory.
pub fn csv_bytes<R, I>(header: &[&str], rows: I) -> Result<(Vec<u8>, usize)>
where
    R: Serialize,
    I: IntoIterator<Item = R>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Numerical(format!("csv encoding: {e}"));
    w.write_record(header).map_err(fail)?;
    let mut n = 0;
    for r in rows {
        w.serialize(r).map_err(fail)?;
        n += 1;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Numerical(format!("csv encoding: {e}")))?;
    Ok((bytes, n))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Numerical(format!("json encoding: {e}")))?;
    s.push(b'\n');
    Ok(s)
}

/// Reads a two-or-more column numeric CSV with a header.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_file(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let bad = |msg: String| CliError::validation(path.display().to_string(), msg);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = rec
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Files written by one run, in order.
#[derive(Debug)]
pub struct ArtifactSet {
    root: PathBuf,
    created_root: bool,
    entries: Vec<Artifact>,
}

impl ArtifactSet {
    /// Creates `root` if needed. Files declared by a previous manifest in
    /// `root` are removed first so that no stale artifact survives.
    pub fn open(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let old = root.join(crate::runner::MANIFEST_FILE);
        if let Ok(text) = fs::read_to_string(&old) {
            if let Ok(m) = serde_json::from_str::<crate::runner::Manifest>(&text) {
                for a in &m.artifacts {
                    let _ = fs::remove_file(root.join(&a.path));
                }
                remove_empty_dirs(root);
            }
            let _ = fs::remove_file(&old);
        }
        Ok(ArtifactSet {
            root: root.to_path_buf(),
            created_root,
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[Artifact] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Artifact> {
        self.entries
    }

    fn put(&mut self, rel: &str, bytes: &[u8], mut meta: Artifact) -> Result<&mut Artifact> {
        let path = self.root.join(rel);
        // Record first so that a failed write is still rolled back.
        meta.path = rel.to_string();
        meta.sha256 = sha256_hex(bytes);
        self.entries.push(meta);
        write_file(&path, bytes)?;
        Ok(self.entries.last_mut().expect("just pushed"))
    }

    pub fn csv<R, I>(&mut self, rel: &str, kind: ArtifactKind, header: &[&str], rows: I) -> Result<&mut Artifact>
    where
        R: Serialize,
        I: IntoIterator<Item = R>,
    {
        let (bytes, n) = csv_bytes(header, rows)?;
        let meta = Artifact {
            path: String::new(),
            kind,
            columns: header.iter().map(|s| s.to_string()).collect(),
            rows: n,
            sha256: String::new(),
            time: None,
            bin_width: None,
            metric: None,
        };
        self.put(rel, &bytes, meta)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, kind: ArtifactKind, value: &T) -> Result<&mut Artifact> {
        let bytes = to_json_bytes(value)?;
        let meta = Artifact {
            path: String::new(),
            kind,
            columns: Vec::new(),
            rows: 0,
            sha256: String::new(),
            time: None,
            bin_width: None,
            metric: None,
        };
        self.put(rel, &bytes, meta)
    }

    /// Removes every file written so far, then empty directories, then the
    /// root if this set created it.
    pub fn rollback(self) {
        for a in &self.entries {
            let _ = fs::remove_file(self.root.join(&a.path));
        }
        remove_empty_dirs(&self.root);
        if self.created_root {
            let _ = fs::remove_dir(&self.root);
        }
    }
}

fn remove_empty_dirs(root: &Path) {
    if let Ok(rd) = fs::read_dir(root) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                remove_empty_dirs(&p);
                let _ = fs::remove_dir(&p);
            }
        }
    }
}

/// `t_0.500000.csv`: fixed six decimals so names sort by time.
pub fn time_tag(t: f64) -> String {
    format!("{t:.6}")
}
