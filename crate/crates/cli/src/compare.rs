//! Differences between two completed runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::io::{read_numeric_csv, ArtifactKind};
use crate::runner::Manifest;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigDelta {
    pub path: String,
    pub a: Value,
    pub b: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnDiff {
    pub name: String,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesDiff {
    pub path: String,
    pub rows_a: usize,
    pub rows_b: usize,
    /// Rows compared: the shorter of the two.
    pub rows_compared: usize,
    pub identical_bytes: bool,
    pub columns: Vec<ColumnDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub config_hash_a: String,
    pub config_hash_b: String,
    pub config_deltas: Vec<ConfigDelta>,
    pub series: Vec<SeriesDiff>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    /// Same config and byte-identical series.
    pub identical: bool,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, out);
            }
        }
        Value::Array(xs) if xs.iter().any(|x| x.is_object() || x.is_array()) => {
            for (i, x) in xs.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn config_deltas(a: &Value, b: &Value) -> Vec<ConfigDelta> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", a, &mut fa);
    flatten("", b, &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter_map(|k| {
            let (x, y) = (fa.get(k).cloned().unwrap_or(Value::Null), fb.get(k).cloned().unwrap_or(Value::Null));
            (x != y).then(|| ConfigDelta { path: k.clone(), a: x, b: y })
        })
        .collect()
}

fn is_series(kind: ArtifactKind) -> bool {
    matches!(kind, ArtifactKind::MetricSeries | ArtifactKind::Diagnostics)
}

fn diff_series(path: &str, dir_a: &Path, dir_b: &Path, same_hash: bool) -> Result<SeriesDiff> {
    let (ha, ra) = read_numeric_csv(&dir_a.join(path))?;
    let (hb, rb) = read_numeric_csv(&dir_b.join(path))?;
    if ha != hb {
        return Err(CliError::validation(
            path,
            format!("schema mismatch: columns {ha:?} vs {hb:?}"),
        ));
    }
    let n = ra.len().min(rb.len());
    let columns = ha
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (mut max, mut sum, mut sa, mut sb) = (0.0f64, 0.0, 0.0, 0.0);
            for i in 0..n {
                let d = (ra[i][j] - rb[i][j]).abs();
                max = max.max(d);
                sum += d;
                sa += ra[i][j];
                sb += rb[i][j];
            }
            let k = n.max(1) as f64;
            ColumnDiff {
                name: name.clone(),
                max_abs_diff: max,
                mean_abs_diff: sum / k,
                mean_a: sa / k,
                mean_b: sb / k,
            }
        })
        .collect();
    Ok(SeriesDiff {
        path: path.to_string(),
        rows_a: ra.len(),
        rows_b: rb.len(),
        rows_compared: n,
        identical_bytes: same_hash,
        columns,
    })
}

/// Compares the configs and every metric or diagnostics series two runs have
/// in common.
pub fn compare_runs(manifest_a: &Path, manifest_b: &Path) -> Result<DiffReport> {
    let (ma, dir_a) = Manifest::load(manifest_a)?;
    let (mb, dir_b) = Manifest::load(manifest_b)?;
    let deltas = config_deltas(&ma.resolved_config, &mb.resolved_config);

    let series_a: BTreeMap<&str, &str> = ma
        .artifacts
        .iter()
        .filter(|a| is_series(a.kind))
        .map(|a| (a.path.as_str(), a.sha256.as_str()))
        .collect();
    let series_b: BTreeMap<&str, &str> = mb
        .artifacts
        .iter()
        .filter(|a| is_series(a.kind))
        .map(|a| (a.path.as_str(), a.sha256.as_str()))
        .collect();
    let mut series = Vec::new();
    let mut only_in_a = Vec::new();
    for (path, ha) in &series_a {
        match series_b.get(path) {
            Some(hb) => series.push(diff_series(path, &dir_a, &dir_b, ha == hb)?),
            None => only_in_a.push(path.to_string()),
        }
    }
    let only_in_b: Vec<String> = series_b
        .keys()
        .filter(|p| !series_a.contains_key(*p))
        .map(|p| p.to_string())
        .collect();
    let identical = deltas.is_empty()
        && only_in_a.is_empty()
        && only_in_b.is_empty()
        && series.iter().all(|s| s.identical_bytes);
    Ok(DiffReport {
        config_hash_a: ma.config_hash,
        config_hash_b: mb.config_hash,
        config_deltas: deltas,
        series,
        only_in_a,
        only_in_b,
        identical,
    })
}
