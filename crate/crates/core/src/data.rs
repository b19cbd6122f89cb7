//! Dataset containers and the on-disk formats: numeric, categorical and
//! mixed CSV, edge lists, sampled-curve CSV and precomputed kernel CSV.
//!
//! Loading is strict about shape and reports offending line numbers. Row
//! order is file order and is preserved everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::CurveSample;
use crate::numerics::SymMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    NumericCsv,
    CategoricalCsv,
    MixedCsv,
    EdgeList,
    CurvesCsv,
    KernelCsv,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "numeric-csv" => DataFormat::NumericCsv,
            "categorical-csv" => DataFormat::CategoricalCsv,
            "mixed-csv" => DataFormat::MixedCsv,
            "edge-list" => DataFormat::EdgeList,
            "curves-csv" => DataFormat::CurvesCsv,
            "kernel-csv" => DataFormat::KernelCsv,
            other => {
                return Err(Error::Config(format!(
                    "unknown data format '{other}' (expected numeric-csv, categorical-csv, \
                     mixed-csv, edge-list, curves-csv or kernel-csv)"
                )))
            }
        })
    }
}

/// Where and how to read a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub format: DataFormat,
    pub label_col: Option<String>,
    pub id_col: Option<String>,
    /// Scale numeric columns to [-1, 1]; the affine map is kept with the data.
    pub scale: bool,
    /// Optional sidecar `id,label` file for formats without a label column
    /// (edge lists, curve and kernel CSVs).
    pub labels_path: Option<PathBuf>,
}

/// Per-column affine map onto [-1, 1], stored so prediction can reapply it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub min: f64,
    pub max: f64,
}

impl ColumnScale {
    pub fn apply(&self, x: f64) -> f64 {
        if self.max > self.min {
            2.0 * (x - self.min) / (self.max - self.min) - 1.0
        } else {
            0.0
        }
    }
}

/// Feature schema captured at fit time and enforced at prediction time.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Schema {
    pub numeric_names: Vec<String>,
    pub cat_names: Vec<String>,
    pub cat_levels: Vec<Vec<String>>,
    pub scaling: Option<Vec<ColumnScale>>,
}

/// One sample in the form kernels evaluate: numeric part, categorical codes
/// and, for functional data, the raw curve.
#[derive(Debug, Clone)]
pub struct Sample {
    pub numeric: Vec<f64>,
    pub categorical: Vec<u16>,
    pub curve: Option<CurveSample>,
}

/// In-memory dataset. Only the parts matching the source format are filled.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Option<Vec<String>>,
    pub numeric: Vec<Vec<f64>>,
    pub numeric_names: Vec<String>,
    pub categorical: Vec<Vec<u16>>,
    pub cat_names: Vec<String>,
    pub cat_levels: Vec<Vec<String>>,
    pub curves: Vec<CurveSample>,
    pub adjacency: Option<SymMatrix>,
    pub kernel: Option<SymMatrix>,
    pub scaling: Option<Vec<ColumnScale>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Dense class codes in lexicographic label order plus the class names.
    pub fn class_index(&self) -> Result<(Vec<usize>, Vec<String>)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Input("dataset has no labels".into()))?;
        let mut names: Vec<String> = labels.to_vec();
        names.sort();
        names.dedup();
        let lookup: BTreeMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let codes = labels.iter().map(|l| lookup[l.as_str()]).collect();
        Ok((codes, names))
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            numeric: self.numeric.get(i).cloned().unwrap_or_default(),
            categorical: self.categorical.get(i).cloned().unwrap_or_default(),
            curve: self.curves.get(i).cloned(),
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            numeric_names: self.numeric_names.clone(),
            cat_names: self.cat_names.clone(),
            cat_levels: self.cat_levels.clone(),
            scaling: self.scaling.clone(),
        }
    }
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    load_dataset_with_schema(manifest, None)
}

/// Load with an optional schema from a fitted model. With a schema, numeric
/// scaling is reapplied instead of refit and unknown categories are errors.
pub fn load_dataset_with_schema(
    manifest: &DatasetManifest,
    schema: Option<&Schema>,
) -> Result<Dataset> {
    let mut ds = match manifest.format {
        DataFormat::NumericCsv | DataFormat::CategoricalCsv | DataFormat::MixedCsv => {
            load_table(manifest, schema)?
        }
        DataFormat::EdgeList => load_edge_list(&manifest.path)?,
        DataFormat::CurvesCsv => load_curves_csv(&manifest.path)?,
        DataFormat::KernelCsv => load_kernel_csv(&manifest.path)?,
    };
    if let Some(path) = &manifest.labels_path {
        apply_label_sidecar(&mut ds, path)?;
    }
    Ok(ds)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.trim().is_empty())
        .collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn split_csv(line: &str) -> Vec<String> {
    line.split(',').map(|f| f.trim().to_string()).collect()
}

#[derive(Clone, Copy, PartialEq)]
enum ColumnKind {
    Numeric,
    Categorical,
    Label,
    Id,
}

/// Shared loader for the three tabular formats.
fn load_table(manifest: &DatasetManifest, schema: Option<&Schema>) -> Result<Dataset> {
    let path = &manifest.path;
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(parse_err(path, 1, "empty file"));
    }
    let header = split_csv(&lines[0]);
    let ncols = header.len();

    // Column roles: explicit type row for mixed data, format default otherwise.
    let mut kinds: Vec<ColumnKind> = match manifest.format {
        DataFormat::NumericCsv => vec![ColumnKind::Numeric; ncols],
        DataFormat::CategoricalCsv => vec![ColumnKind::Categorical; ncols],
        DataFormat::MixedCsv => {
            if lines.len() < 2 {
                return Err(parse_err(path, 2, "mixed-csv needs a column-type row"));
            }
            let types = split_csv(&lines[1]);
            if types.len() != ncols {
                return Err(parse_err(
                    path,
                    2,
                    format!("type row has {} entries, header has {}", types.len(), ncols),
                ));
            }
            types
                .iter()
                .enumerate()
                .map(|(c, t)| match t.as_str() {
                    "num" => Ok(ColumnKind::Numeric),
                    "cat" => Ok(ColumnKind::Categorical),
                    "label" => Ok(ColumnKind::Label),
                    "id" => Ok(ColumnKind::Id),
                    other => Err(parse_err(
                        path,
                        2,
                        format!("column {c}: unknown type '{other}' (num|cat|label|id)"),
                    )),
                })
                .collect::<Result<_>>()?
        }
        _ => unreachable!(),
    };
    let first_data_line = if manifest.format == DataFormat::MixedCsv { 2 } else { 1 };

    if let Some(name) = &manifest.label_col {
        let c = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("label column '{name}' not found")))?;
        kinds[c] = ColumnKind::Label;
    }
    if let Some(name) = &manifest.id_col {
        let c = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("id column '{name}' not found")))?;
        kinds[c] = ColumnKind::Id;
    }

    let num_cols: Vec<usize> = (0..ncols).filter(|&c| kinds[c] == ColumnKind::Numeric).collect();
    let cat_cols: Vec<usize> = (0..ncols)
        .filter(|&c| kinds[c] == ColumnKind::Categorical)
        .collect();
    let label_col = (0..ncols).find(|&c| kinds[c] == ColumnKind::Label);
    let id_col = (0..ncols).find(|&c| kinds[c] == ColumnKind::Id);

    if let Some(s) = schema {
        let got: Vec<&String> = num_cols.iter().map(|&c| &header[c]).collect();
        if got.iter().map(|s| s.as_str()).ne(s.numeric_names.iter().map(|s| s.as_str())) {
            return Err(parse_err(
                path,
                1,
                format!("numeric columns {:?} do not match the model's {:?}", got, s.numeric_names),
            ));
        }
        let got: Vec<&String> = cat_cols.iter().map(|&c| &header[c]).collect();
        if got.iter().map(|s| s.as_str()).ne(s.cat_names.iter().map(|s| s.as_str())) {
            return Err(parse_err(
                path,
                1,
                format!("categorical columns {:?} do not match the model's {:?}", got, s.cat_names),
            ));
        }
    }

    let mut ids = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut numeric: Vec<Vec<f64>> = Vec::new();
    let mut cat_raw: Vec<Vec<String>> = Vec::new();
    for (li, line) in lines.iter().enumerate().skip(first_data_line) {
        let row = split_csv(line);
        if row.len() != ncols {
            return Err(parse_err(
                path,
                li + 1,
                format!("row has {} fields, expected {}", row.len(), ncols),
            ));
        }
        ids.push(match id_col {
            Some(c) => row[c].clone(),
            None => (ids.len()).to_string(),
        });
        if let Some(c) = label_col {
            labels.push(row[c].clone());
        }
        let nums = num_cols
            .iter()
            .map(|&c| {
                row[c].parse::<f64>().map_err(|_| {
                    parse_err(path, li + 1, format!("column '{}': invalid number '{}'", header[c], row[c]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        numeric.push(nums);
        cat_raw.push(cat_cols.iter().map(|&c| row[c].clone()).collect());
    }
    if ids.is_empty() {
        return Err(parse_err(path, first_data_line + 1, "no data rows"));
    }

    // Categorical dictionaries: from the schema when predicting, otherwise
    // the sorted distinct values per column.
    let cat_levels: Vec<Vec<String>> = match schema {
        Some(s) => s.cat_levels.clone(),
        None => (0..cat_cols.len())
            .map(|j| {
                let mut vals: Vec<String> = cat_raw.iter().map(|r| r[j].clone()).collect();
                vals.sort();
                vals.dedup();
                vals
            })
            .collect(),
    };
    let mut categorical = Vec::with_capacity(cat_raw.len());
    for (ri, row) in cat_raw.iter().enumerate() {
        let mut codes = Vec::with_capacity(row.len());
        for (j, v) in row.iter().enumerate() {
            match cat_levels[j].binary_search(v) {
                Ok(code) => codes.push(code as u16),
                Err(_) => {
                    return Err(parse_err(
                        path,
                        first_data_line + ri + 1,
                        format!(
                            "column '{}': unknown category '{}'",
                            header[cat_cols[j]], v
                        ),
                    ))
                }
            }
        }
        categorical.push(codes);
    }

    // Numeric scaling: refit on load, or reapply the stored map.
    let scaling = match schema {
        Some(s) => s.scaling.clone(),
        None if manifest.scale && !num_cols.is_empty() => {
            let p = num_cols.len();
            let mut sc = Vec::with_capacity(p);
            for j in 0..p {
                let col: Vec<f64> = numeric.iter().map(|r| r[j]).collect();
                let min = col.iter().copied().fold(f64::INFINITY, f64::min);
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                sc.push(ColumnScale { min, max });
            }
            Some(sc)
        }
        None => None,
    };
    if let Some(sc) = &scaling {
        for row in numeric.iter_mut() {
            for (x, s) in row.iter_mut().zip(sc) {
                *x = s.apply(*x);
            }
        }
    }

    Ok(Dataset {
        ids,
        labels: if label_col.is_some() { Some(labels) } else { None },
        numeric,
        numeric_names: num_cols.iter().map(|&c| header[c].clone()).collect(),
        categorical,
        cat_names: cat_cols.iter().map(|&c| header[c].clone()).collect(),
        cat_levels,
        ..Default::default()
    })
}

/// Whitespace-separated node pairs, one edge per line. Node names become
/// sample ids (numeric names sort numerically).
fn load_edge_list(path: &Path) -> Result<Dataset> {
    let lines = read_lines(path)?;
    let mut edges: Vec<(String, String, usize)> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (li, line) in lines.iter().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(
                path,
                li + 1,
                format!("expected 'a b' edge, got {} tokens", toks.len()),
            ));
        }
        if toks[0] == toks[1] {
            return Err(parse_err(path, li + 1, format!("self-loop on node '{}'", toks[0])));
        }
        edges.push((toks[0].to_string(), toks[1].to_string(), li + 1));
        names.push(toks[0].to_string());
        names.push(toks[1].to_string());
    }
    if edges.is_empty() {
        return Err(parse_err(path, 1, "empty edge list"));
    }
    names.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    names.dedup();
    let index: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut adj = SymMatrix::zeros(names.len());
    for (a, b, _) in &edges {
        adj.set(index[a.as_str()], index[b.as_str()], 1.0);
    }
    Ok(Dataset {
        ids: names,
        adjacency: Some(adj),
        ..Default::default()
    })
}

/// First column is the time grid, each further column one curve. A grid
/// outside [0, 1] is affinely rescaled onto it.
fn load_curves_csv(path: &Path) -> Result<Dataset> {
    let lines = read_lines(path)?;
    if lines.len() < 3 {
        return Err(parse_err(path, 1, "curves file needs a header and at least 2 rows"));
    }
    let header = split_csv(&lines[0]);
    if header.len() < 2 {
        return Err(parse_err(path, 1, "curves file needs a time column and at least one curve"));
    }
    let ncols = header.len();
    let mut grid = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); ncols - 1];
    for (li, line) in lines.iter().enumerate().skip(1) {
        let row = split_csv(line);
        if row.len() != ncols {
            return Err(parse_err(
                path,
                li + 1,
                format!("row has {} fields, expected {}", row.len(), ncols),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| parse_err(path, li + 1, format!("invalid number '{s}'")))
        };
        grid.push(parse(&row[0])?);
        for (j, col) in cols.iter_mut().enumerate() {
            col.push(parse(&row[j + 1])?);
        }
    }
    let (min, max) = (
        grid.iter().copied().fold(f64::INFINITY, f64::min),
        grid.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    if min < 0.0 || max > 1.0 {
        if max <= min {
            return Err(parse_err(path, 2, "degenerate time grid"));
        }
        for t in grid.iter_mut() {
            *t = (*t - min) / (max - min);
        }
    }
    let curves = cols
        .into_iter()
        .map(|values| CurveSample::new(grid.clone(), values))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        ids: header[1..].to_vec(),
        curves,
        ..Default::default()
    })
}

/// Square numeric CSV with a header row of sample ids. Symmetry is checked
/// within 1e-9 and the matrix is then symmetrized by averaging.
fn load_kernel_csv(path: &Path) -> Result<Dataset> {
    let lines = read_lines(path)?;
    if lines.len() < 2 {
        return Err(parse_err(path, 1, "kernel file needs a header and data rows"));
    }
    let ids = split_csv(&lines[0]);
    let n = ids.len();
    if lines.len() - 1 != n {
        return Err(parse_err(
            path,
            lines.len(),
            format!("kernel matrix has {} rows for {} ids", lines.len() - 1, n),
        ));
    }
    let mut rows = Vec::with_capacity(n);
    for (li, line) in lines.iter().enumerate().skip(1) {
        let row = split_csv(line);
        if row.len() != n {
            return Err(parse_err(
                path,
                li + 1,
                format!("row has {} fields, expected {}", row.len(), n),
            ));
        }
        let vals = row
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(path, li + 1, format!("invalid number '{s}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    for i in 0..n {
        for j in i + 1..n {
            if (rows[i][j] - rows[j][i]).abs() > 1e-9 {
                return Err(parse_err(
                    path,
                    i + 2,
                    format!(
                        "kernel not symmetric: entry ({},{}) = {} but ({},{}) = {} (line {})",
                        i, j, rows[i][j], j, i, rows[j][i], j + 2
                    ),
                ));
            }
        }
    }
    Ok(Dataset {
        ids,
        kernel: Some(SymMatrix::from_rows(&rows)?),
        ..Default::default()
    })
}

/// Attach labels from an `id,label` sidecar file.
fn apply_label_sidecar(ds: &mut Dataset, path: &Path) -> Result<()> {
    let lines = read_lines(path)?;
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (li, line) in lines.iter().enumerate() {
        let row = split_csv(line);
        if row.len() != 2 {
            return Err(parse_err(path, li + 1, "expected 'id,label'"));
        }
        map.insert(row[0].clone(), row[1].clone());
    }
    let labels = ds
        .ids
        .iter()
        .map(|id| {
            map.get(id)
                .cloned()
                .ok_or_else(|| Error::Input(format!("labels file has no entry for id '{id}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    ds.labels = Some(labels);
    Ok(())
}

/// Real formatted with 17 significant digits, locale-independent.
pub fn fmt_g17(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Write a file atomically: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
