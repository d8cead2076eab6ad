//! File formats: feature and group-map CSVs, targets, kernel files with
//! sidecar metadata and a stack manifest, and JSON documents.
//!
//! Every write goes to a temporary file in the destination directory and is
//! renamed into place, so readers never observe a partially written file.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MklError, Result};
use crate::kernel::{GroupedDataset, KernelMatrix, KernelStack};
use crate::mkl::KernelKind;
use crate::task::{Targets, Task};

const BINARY_MAGIC: &[u8; 8] = b"ENMKLKRN";

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| MklError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(MklError::io(path, e));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| MklError::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| MklError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| MklError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| MklError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(f))
}

fn record_line(r: &csv::StringRecord) -> usize {
    r.position().map_or(0, |p| p.line() as usize)
}

fn csv_error(path: &Path, e: csv::Error) -> MklError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    MklError::parse(path, line, e.to_string())
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| MklError::parse(path, line, format!("cannot parse {what} `{field}` as a number")))?;
    if !v.is_finite() {
        return Err(MklError::parse(path, line, format!("{what} `{field}` is not finite")));
    }
    Ok(v)
}

/// Feature table: first column sample id, remaining columns features.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_features(path: &Path) -> Result<FeatureTable> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(MklError::parse(path, 1, "header needs a sample id column and at least one feature"));
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen_names = HashSet::new();
    for name in &feature_names {
        if !seen_names.insert(name.as_str()) {
            return Err(MklError::parse(path, 1, format!("duplicate feature column `{name}`")));
        }
    }
    let p = feature_names.len();
    let mut ids = Vec::new();
    let mut seen = HashMap::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != p + 1 {
            return Err(MklError::parse(path, line, format!("expected {} fields, found {}", p + 1, rec.len())));
        }
        let id = rec[0].to_string();
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(MklError::parse(path, line, format!("duplicate sample id `{id}` (first seen on line {prev})")));
        }
        for (c, field) in rec.iter().skip(1).enumerate() {
            data.push(parse_f64(path, line, field, &format!("feature `{}`", feature_names[c]))?);
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(MklError::parse(path, 1, "no samples"));
    }
    Ok(FeatureTable {
        values: DMatrix::from_row_slice(ids.len(), p, &data),
        sample_ids: ids,
        feature_names,
    })
}

/// Group map: `(feature_name, group_name)` rows. Group order follows first
/// appearance; a row with an empty feature name declares a group.
#[derive(Debug, Clone)]
pub struct GroupMap {
    pub group_names: Vec<String>,
    /// feature name -> (group index, line number)
    pub assignments: HashMap<String, (usize, usize)>,
}

pub fn read_group_map(path: &Path) -> Result<GroupMap> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() != 2 {
        return Err(MklError::parse(path, 1, "group map needs exactly two columns: feature_name, group_name"));
    }
    let mut group_names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut assignments = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(MklError::parse(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let (feature, group) = (&rec[0], &rec[1]);
        if group.is_empty() {
            return Err(MklError::parse(path, line, "empty group name"));
        }
        let g = *index.entry(group.to_string()).or_insert_with(|| {
            group_names.push(group.to_string());
            group_names.len() - 1
        });
        if feature.is_empty() {
            continue;
        }
        if let Some((_, prev)) = assignments.insert(feature.to_string(), (g, line)) {
            return Err(MklError::parse(
                path,
                line,
                format!("feature `{feature}` is mapped twice (first on line {prev})"),
            ));
        }
    }
    Ok(GroupMap {
        group_names,
        assignments,
    })
}

/// Joins a feature table with a group map.
pub fn load_dataset(features_path: &Path, groups_path: &Path) -> Result<GroupedDataset> {
    let table = read_features(features_path)?;
    let map = read_group_map(groups_path)?;
    let known: HashSet<&str> = table.feature_names.iter().map(String::as_str).collect();
    let mut stray: Vec<(&String, usize)> = map
        .assignments
        .iter()
        .filter(|(f, _)| !known.contains(f.as_str()))
        .map(|(f, &(_, line))| (f, line))
        .collect();
    stray.sort_by_key(|s| s.1);
    if let Some((f, line)) = stray.first() {
        return Err(MklError::parse(groups_path, *line, format!("feature `{f}` does not exist in {}", features_path.display())));
    }
    let mut column_groups = Vec::with_capacity(table.feature_names.len());
    for name in &table.feature_names {
        match map.assignments.get(name) {
            Some(&(g, _)) => column_groups.push(g),
            None => {
                return Err(MklError::parse(
                    features_path,
                    1,
                    format!("feature column `{name}` is not assigned to any group"),
                ))
            }
        }
    }
    GroupedDataset::new(table.values, table.feature_names, column_groups, map.group_names, table.sample_ids)
}

/// Rearranges a feature table into the given `(group, feature names)` layout,
/// looking columns up by name. Extra columns are ignored.
pub fn dataset_with_layout(path: &Path, table: &FeatureTable, layout: &[(String, Vec<String>)]) -> Result<GroupedDataset> {
    let index: HashMap<&str, usize> = table.feature_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut cols = Vec::new();
    let mut names = Vec::new();
    let mut groups = Vec::new();
    for (g, (_, features)) in layout.iter().enumerate() {
        for f in features {
            let c = *index
                .get(f.as_str())
                .ok_or_else(|| MklError::parse(path, 1, format!("missing feature column `{f}`")))?;
            cols.push(c);
            names.push(f.clone());
            groups.push(g);
        }
    }
    let values = table.values.select_columns(&cols);
    GroupedDataset::new(
        values,
        names,
        groups,
        layout.iter().map(|l| l.0.clone()).collect(),
        table.sample_ids.clone(),
    )
}

/// Two-column `(sample_id, value)` table keyed by id.
fn read_keyed_column(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut rdr = csv_reader(path)?;
    rdr.headers().map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(MklError::parse(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        if let Some(prev) = seen.insert(rec[0].to_string(), line) {
            return Err(MklError::parse(path, line, format!("duplicate sample id `{}` (first on line {prev})", &rec[0])));
        }
        rows.push((rec[0].to_string(), rec[1].to_string(), line));
    }
    Ok(rows)
}

fn align<'a>(path: &Path, rows: &'a [(String, String, usize)], ids: &[String]) -> Result<Vec<&'a (String, String, usize)>> {
    let by_id: HashMap<&str, &(String, String, usize)> = rows.iter().map(|r| (r.0.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| MklError::IdMismatch(format!("{} has no entry for sample `{id}`", path.display())))
        })
        .collect()
}

/// Maps two class names onto -1/+1. Numeric names order numerically,
/// otherwise lexicographically; the larger name becomes +1.
pub fn label_mapping(names: &[String]) -> Result<[String; 2]> {
    let mut uniq: Vec<&String> = names.iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if uniq.len() != 2 {
        return Err(MklError::InvalidLabels(format!(
            "classification needs exactly two classes, found {}",
            uniq.len()
        )));
    }
    if let (Ok(a), Ok(b)) = (uniq[0].parse::<f64>(), uniq[1].parse::<f64>()) {
        if a > b {
            uniq.swap(0, 1);
        }
    }
    Ok([uniq[0].clone(), uniq[1].clone()])
}

/// Reads `(sample_id, target)` rows aligned to `ids`. Classification labels
/// may be arbitrary strings; the returned pair names the -1 and +1 classes.
pub fn read_targets(path: &Path, ids: &[String], task: Task, mapping: Option<&[String; 2]>) -> Result<(Targets, Option<[String; 2]>)> {
    let rows = read_keyed_column(path)?;
    let aligned = align(path, &rows, ids)?;
    match task {
        Task::Regression => {
            let values = aligned
                .iter()
                .map(|(_, v, line)| parse_f64(path, *line, v, "target"))
                .collect::<Result<Vec<_>>>()?;
            Ok((Targets::regression(values)?, None))
        }
        Task::Classification => {
            let names: Vec<String> = aligned.iter().map(|r| r.1.clone()).collect();
            let map = match mapping {
                Some(m) => m.clone(),
                None => label_mapping(&names)?,
            };
            let values = aligned
                .iter()
                .map(|(_, v, line)| {
                    if *v == map[0] {
                        Ok(-1.0)
                    } else if *v == map[1] {
                        Ok(1.0)
                    } else {
                        Err(MklError::parse(path, *line, format!("unknown class `{v}`")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((Targets::labels(values)?, Some(map)))
        }
    }
}

/// Block labels aligned to `ids`.
pub fn read_blocks(path: &Path, ids: &[String]) -> Result<Vec<String>> {
    let rows = read_keyed_column(path)?;
    Ok(align(path, &rows, ids)?.into_iter().map(|r| r.1.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFormat {
    Csv,
    Binary,
}

/// Sidecar metadata stored next to each kernel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub group: String,
    pub group_size: usize,
    pub centered: bool,
    pub normalized: bool,
    pub rows: usize,
    pub cols: usize,
    pub format: KernelFormat,
    pub kernel_kind: KernelKind,
    /// Raw self-similarities of the row samples (cross-kernels only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_self_similarity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub group: String,
    pub file: String,
    pub meta: String,
}

/// Index of a kernel stack on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub format: KernelFormat,
    pub kernel_kind: KernelKind,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub kernels: Vec<ManifestEntry>,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn kernel_csv_bytes(k: &KernelMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend(k.col_ids().iter().cloned());
    w.write_record(&header).map_err(|e| MklError::InvalidParameter(e.to_string()))?;
    for (i, id) in k.row_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..k.ncols()).map(|j| k.get(i, j).to_string()));
        w.write_record(&row).map_err(|e| MklError::InvalidParameter(e.to_string()))?;
    }
    w.into_inner().map_err(|e| MklError::InvalidParameter(e.to_string()))
}

fn kernel_binary_bytes(k: &KernelMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * k.nrows() * k.ncols());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(k.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(k.ncols() as u64).to_le_bytes());
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            out.extend_from_slice(&k.get(i, j).to_le_bytes());
        }
    }
    out
}

/// Reads a CSV kernel: header `id,<col ids>`, then one row per sample.
pub fn read_kernel_csv(path: &Path) -> Result<KernelMatrix> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = record_line(&rec);
        if rec.len() != col_ids.len() + 1 {
            return Err(MklError::parse(path, line, format!("expected {} fields, found {}", col_ids.len() + 1, rec.len())));
        }
        row_ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            data.push(parse_f64(path, line, f, "kernel entry")?);
        }
    }
    let values = DMatrix::from_row_slice(row_ids.len(), col_ids.len(), &data);
    KernelMatrix::new(values, row_ids, col_ids)
}

pub fn read_kernel_binary(path: &Path, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<KernelMatrix> {
    let bytes = fs::read(path).map_err(|e| MklError::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != BINARY_MAGIC {
        return Err(MklError::parse(path, 0, "not a binary kernel file (bad magic)"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 24 + 8 * rows * cols {
        return Err(MklError::parse(path, 0, format!("expected {rows}x{cols} entries, file size disagrees")));
    }
    let data: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    KernelMatrix::new(DMatrix::from_row_slice(rows, cols, &data), row_ids, col_ids)
}

/// Writes every kernel of `stack` plus sidecars and `manifest.json` into `dir`.
/// `row_self` carries raw self-similarities of row samples for cross-kernels.
pub fn write_stack(
    dir: &Path,
    stack: &KernelStack,
    format: KernelFormat,
    kind: KernelKind,
    row_self: Option<&[Vec<f64>]>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| MklError::io(dir, e))?;
    let mut entries = Vec::with_capacity(stack.len());
    for (j, k) in stack.kernels().iter().enumerate() {
        let group = &stack.group_names()[j];
        let stem = format!("kernel_{j:03}_{}", sanitize(group));
        let file = match format {
            KernelFormat::Csv => format!("{stem}.csv"),
            KernelFormat::Binary => format!("{stem}.bin"),
        };
        let bytes = match format {
            KernelFormat::Csv => kernel_csv_bytes(k)?,
            KernelFormat::Binary => kernel_binary_bytes(k),
        };
        write_atomic(&dir.join(&file), &bytes)?;
        let meta = KernelMeta {
            group: group.clone(),
            group_size: stack.group_sizes()[j],
            centered: k.is_centered(),
            normalized: k.is_normalized(),
            rows: k.nrows(),
            cols: k.ncols(),
            format,
            kernel_kind: kind,
            row_self_similarity: row_self.map(|s| s[j].clone()),
        };
        let meta_file = format!("{stem}.meta.json");
        write_json(&dir.join(&meta_file), &meta)?;
        entries.push(ManifestEntry {
            group: group.clone(),
            file,
            meta: meta_file,
        });
    }
    let manifest = StackManifest {
        format,
        kernel_kind: kind,
        row_ids: stack.row_ids().to_vec(),
        col_ids: stack.col_ids().to_vec(),
        kernels: entries,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Stack loaded from a manifest, with any stored row self-similarities.
#[derive(Debug, Clone)]
pub struct LoadedStack {
    pub stack: KernelStack,
    pub kernel_kind: KernelKind,
    pub row_self_similarity: Option<Vec<Vec<f64>>>,
}

pub fn read_stack(manifest_path: &Path) -> Result<LoadedStack> {
    let manifest: StackManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut kernels = Vec::new();
    let mut names = Vec::new();
    let mut sizes = Vec::new();
    let mut selfs = Vec::new();
    for e in &manifest.kernels {
        let meta: KernelMeta = read_json(&dir.join(&e.meta))?;
        let path = dir.join(&e.file);
        let k = match meta.format {
            KernelFormat::Csv => read_kernel_csv(&path)?,
            KernelFormat::Binary => read_kernel_binary(&path, manifest.row_ids.clone(), manifest.col_ids.clone())?,
        };
        if k.row_ids() != manifest.row_ids.as_slice() || k.col_ids() != manifest.col_ids.as_slice() {
            return Err(MklError::IdMismatch(format!("{} does not match the manifest sample ids", path.display())));
        }
        if k.nrows() != meta.rows || k.ncols() != meta.cols {
            return Err(MklError::Dimension(format!("{} disagrees with its metadata dimensions", path.display())));
        }
        kernels.push(k.with_flags(meta.centered, meta.normalized));
        names.push(meta.group);
        sizes.push(meta.group_size);
        selfs.push(meta.row_self_similarity);
    }
    let row_self_similarity = if selfs.iter().all(Option::is_some) {
        Some(selfs.into_iter().flatten().collect())
    } else {
        None
    };
    Ok(LoadedStack {
        stack: KernelStack::new(kernels, names, sizes)?,
        kernel_kind: manifest.kernel_kind,
        row_self_similarity,
    })
}

/// CSV of `(group, weight)` rows.
pub fn weights_csv(rows: &[(String, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "weight"]).map_err(|e| MklError::InvalidParameter(e.to_string()))?;
    for (g, b) in rows {
        w.write_record([g.as_str(), &b.to_string()])
            .map_err(|e| MklError::InvalidParameter(e.to_string()))?;
    }
    w.into_inner().map_err(|e| MklError::InvalidParameter(e.to_string()))
}
