//! Schema-driven tabular encoding and iterative missing-value imputation.
//!
//! Continuous attributes are standardized with training-split statistics;
//! binary/categorical attributes become one-hot blocks. Missing cells are
//! filled by an iterative scheme: initialize with column means, then sweep
//! the columns in schema order, fitting a ridge regressor of each column on
//! all the others over its originally-observed rows and overwriting only the
//! originally-missing cells. Columns that had missing values get an appended
//! 0/1 indicator column.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("row {row}, column `{col}`: cannot parse `{value}` as {expected}")]
    Parse {
        row: usize,
        col: String,
        value: String,
        expected: &'static str,
    },
    #[error("column `{col}`: unknown categorical level `{level}`")]
    UnknownLevel { col: String, level: String },
    #[error("column `{col}` has no observed values")]
    AllMissing { col: String },
    #[error("row {row} has {got} cells, schema expects {expected}")]
    RowWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("schema drift: {0}")]
    SchemaDrift(String),
    #[error("imputation needs sweeps >= 1, got {0}")]
    BadSweeps(usize),
    #[error("encoding for val/test requires the training fit statistics")]
    MissingFitStats,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Continuous,
    Binary,
    Categorical(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct SchemaColumn {
    pub name: String,
    pub kind: ColumnKind,
}

/// Declarative description of the raw tabular columns.
#[derive(Debug, Clone)]
pub struct TabularSchema {
    pub columns: Vec<SchemaColumn>,
}

#[derive(Serialize, Deserialize)]
struct SchemaColumnJson {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    levels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SchemaJson {
    columns: Vec<SchemaColumnJson>,
}

impl TabularSchema {
    pub fn new(columns: Vec<SchemaColumn>) -> Self {
        let mut names: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), columns.len(), "duplicate column names in schema");
        for c in &columns {
            if let ColumnKind::Categorical(levels) = &c.kind {
                assert!(levels.len() >= 2, "categorical `{}` needs >= 2 levels", c.name);
            }
        }
        TabularSchema { columns }
    }

    pub fn to_json(&self) -> String {
        let cols = self
            .columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Continuous => SchemaColumnJson {
                    name: c.name.clone(),
                    kind: "continuous".into(),
                    levels: vec![],
                },
                ColumnKind::Binary => SchemaColumnJson {
                    name: c.name.clone(),
                    kind: "binary".into(),
                    levels: vec![],
                },
                ColumnKind::Categorical(levels) => SchemaColumnJson {
                    name: c.name.clone(),
                    kind: "categorical".into(),
                    levels: levels.clone(),
                },
            })
            .collect();
        serde_json::to_string_pretty(&SchemaJson { columns: cols }).expect("schema json")
    }

    pub fn from_json(text: &str) -> Result<Self, TabularError> {
        let parsed: SchemaJson = serde_json::from_str(text)
            .map_err(|e| TabularError::SchemaDrift(format!("bad schema json: {e}")))?;
        let columns = parsed
            .columns
            .into_iter()
            .map(|c| {
                let kind = match c.kind.as_str() {
                    "continuous" => ColumnKind::Continuous,
                    "binary" => ColumnKind::Binary,
                    "categorical" => ColumnKind::Categorical(c.levels),
                    other => {
                        return Err(TabularError::SchemaDrift(format!(
                            "unknown column kind `{other}`"
                        )))
                    }
                };
                Ok(SchemaColumn { name: c.name, kind })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TabularSchema::new(columns))
    }

    /// Width of the encoded matrix (before indicators).
    pub fn encoded_width(&self) -> usize {
        self.columns.iter().map(|c| Self::block_width(&c.kind)).sum()
    }

    fn block_width(kind: &ColumnKind) -> usize {
        match kind {
            ColumnKind::Continuous => 1,
            ColumnKind::Binary => 2,
            ColumnKind::Categorical(levels) => levels.len(),
        }
    }
}

/// A raw cell; `None` marks a missing value.
pub type RawRow = Vec<Option<String>>;

/// Parse a CSV cell: empty or a case-insensitive `NaN` token is missing.
pub fn parse_cell(cell: &str) -> Option<String> {
    let trimmed = cell.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("nan") {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// Read a CSV with header into raw rows.
pub fn read_raw_csv(path: &Path) -> Result<(Vec<String>, Vec<RawRow>), TabularError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(parse_cell).collect());
    }
    Ok((header, rows))
}

/// Per-continuous-column standardization statistics from the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeStats {
    /// (mean, std) per schema column; None for one-hot columns.
    pub continuous: Vec<Option<(f64, f64)>>,
}

/// Encoded block span for one original column.
#[derive(Debug, Clone)]
pub struct EncodedBlock {
    pub name: String,
    pub range: Range<usize>,
}

/// Encoded attribute matrix with its pre-imputation missing mask.
#[derive(Debug, Clone)]
pub struct TabularMatrix {
    pub n_rows: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    pub col_names: Vec<String>,
    pub blocks: Vec<EncodedBlock>,
    /// Indicator columns appended by imputation: (original column name, 0/1 per row).
    pub indicators: Vec<(String, Vec<f64>)>,
}

impl TabularMatrix {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[row * self.width + col]
    }

    /// Model input: encoded values plus indicator columns (optionally dropped).
    pub fn to_model_input(&self, drop_indicators: bool) -> Tensor {
        let extra = if drop_indicators { 0 } else { self.indicators.len() };
        let w = self.width + extra;
        let mut data = Vec::with_capacity(self.n_rows * w);
        for i in 0..self.n_rows {
            data.extend_from_slice(&self.values[i * self.width..(i + 1) * self.width]);
            if !drop_indicators {
                for (_, col) in &self.indicators {
                    data.push(col[i]);
                }
            }
        }
        Tensor::new(&[self.n_rows, w], data).expect("model input shape")
    }

    /// Column names of `to_model_input`.
    pub fn input_names(&self, drop_indicators: bool) -> Vec<String> {
        let mut names = self.col_names.clone();
        if !drop_indicators {
            for (orig, _) in &self.indicators {
                names.push(format!("{orig}__missing"));
            }
        }
        names
    }
}

/// Encode raw rows against a schema. `fit` carries the training-split
/// standardization statistics; pass `None` only when encoding the training
/// split itself. Returns the matrix, the (possibly reused) stats, and
/// warnings for degenerate columns.
pub fn encode(
    schema: &TabularSchema,
    rows: &[RawRow],
    fit: Option<&EncodeStats>,
) -> Result<(TabularMatrix, EncodeStats, Vec<String>), TabularError> {
    let n = rows.len();
    let expected = schema.columns.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != expected {
            return Err(TabularError::RowWidth {
                row: i,
                got: row.len(),
                expected,
            });
        }
    }

    let mut warnings = Vec::new();
    // Parse continuous cells once; compute stats if not provided.
    let mut stats = Vec::with_capacity(expected);
    let mut parsed: Vec<Vec<Option<f64>>> = vec![Vec::new(); expected];
    for (ci, col) in schema.columns.iter().enumerate() {
        if col.kind == ColumnKind::Continuous {
            let mut vals = Vec::with_capacity(n);
            for (ri, row) in rows.iter().enumerate() {
                match &row[ci] {
                    None => vals.push(None),
                    Some(text) => {
                        let v: f64 = text.parse().map_err(|_| TabularError::Parse {
                            row: ri,
                            col: col.name.clone(),
                            value: text.clone(),
                            expected: "a number",
                        })?;
                        vals.push(Some(v));
                    }
                }
            }
            let stat = match fit {
                Some(f) => f.continuous[ci].ok_or_else(|| {
                    TabularError::SchemaDrift(format!(
                        "fit stats missing for continuous column `{}`",
                        col.name
                    ))
                })?,
                None => {
                    let observed: Vec<f64> = vals.iter().flatten().copied().collect();
                    if observed.is_empty() {
                        return Err(TabularError::AllMissing {
                            col: col.name.clone(),
                        });
                    }
                    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                    let var = observed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / observed.len() as f64;
                    let std = var.sqrt();
                    if std == 0.0 {
                        warnings.push(format!(
                            "column `{}` is constant on the training split; encoding as zeros",
                            col.name
                        ));
                    }
                    (mean, std)
                }
            };
            stats.push(Some(stat));
            parsed[ci] = vals;
        } else {
            stats.push(None);
        }
    }

    let width = schema.encoded_width();
    let mut values = vec![0.0; n * width];
    let mut missing = vec![false; n * width];
    let mut col_names = Vec::with_capacity(width);
    let mut blocks = Vec::with_capacity(expected);

    let mut start = 0usize;
    for (ci, col) in schema.columns.iter().enumerate() {
        let bw = TabularSchema::block_width(&col.kind);
        blocks.push(EncodedBlock {
            name: col.name.clone(),
            range: start..start + bw,
        });
        match &col.kind {
            ColumnKind::Continuous => col_names.push(col.name.clone()),
            ColumnKind::Binary => {
                col_names.push(format!("{}=0", col.name));
                col_names.push(format!("{}=1", col.name));
            }
            ColumnKind::Categorical(levels) => {
                for level in levels {
                    col_names.push(format!("{}={}", col.name, level));
                }
            }
        }
        for (ri, row) in rows.iter().enumerate() {
            let base = ri * width + start;
            match (&col.kind, &row[ci]) {
                (ColumnKind::Continuous, _) => match parsed[ci][ri] {
                    Some(v) => {
                        let (mean, std) = stats[ci].unwrap();
                        values[base] = if std == 0.0 { 0.0 } else { (v - mean) / std };
                    }
                    None => missing[base] = true,
                },
                (_, None) => {
                    for k in 0..bw {
                        missing[base + k] = true;
                    }
                }
                (ColumnKind::Binary, Some(text)) => {
                    let v: f64 = text.parse().map_err(|_| TabularError::Parse {
                        row: ri,
                        col: col.name.clone(),
                        value: text.clone(),
                        expected: "0 or 1",
                    })?;
                    if v != 0.0 && v != 1.0 {
                        return Err(TabularError::Parse {
                            row: ri,
                            col: col.name.clone(),
                            value: text.clone(),
                            expected: "0 or 1",
                        });
                    }
                    values[base + v as usize] = 1.0;
                }
                (ColumnKind::Categorical(levels), Some(text)) => {
                    match levels.iter().position(|l| l == text) {
                        Some(idx) => values[base + idx] = 1.0,
                        None => {
                            return Err(TabularError::UnknownLevel {
                                col: col.name.clone(),
                                level: text.clone(),
                            })
                        }
                    }
                }
            }
        }
        start += bw;
    }

    Ok((
        TabularMatrix {
            n_rows: n,
            width,
            values,
            missing,
            col_names,
            blocks,
            indicators: Vec::new(),
        },
        EncodeStats { continuous: stats },
        warnings,
    ))
}

/// Ridge regressor of one encoded column on all the others.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnRegressor {
    /// Coefficients over the other encoded columns, in column order with
    /// the target column skipped.
    pub coef: Vec<f64>,
    pub intercept: f64,
}

/// Fitted imputation pipeline, reusable on new rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationModel {
    pub col_names: Vec<String>,
    pub col_means: Vec<f64>,
    /// Regressor per encoded column; None when the column had no missing
    /// values on the training split.
    pub regressors: Vec<Option<ColumnRegressor>>,
    /// Original-column names that get indicator columns, in block order.
    pub indicator_columns: Vec<String>,
    pub sweeps: usize,
    pub lambda: f64,
    pub seed: u64,
}

pub const RIDGE_LAMBDA: f64 = 1e-3;

/// Solve (X^T X + lambda I) beta = X^T y with an unpenalized intercept.
fn ridge_fit(xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> ColumnRegressor {
    let n = xs.len();
    let p = xs[0].len();
    // Normal equations over the design [x, 1].
    let dim = p + 1;
    let mut a = vec![vec![0.0; dim]; dim];
    let mut b = vec![0.0; dim];
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x[i] * x[j];
            }
            a[i][p] += x[i];
            a[p][i] += x[i];
            b[i] += x[i] * y;
        }
        b[p] += y;
    }
    a[p][p] = n as f64;
    for (i, row) in a.iter_mut().enumerate().take(p) {
        row[i] += lambda;
    }

    let beta = solve_linear(a, b);
    ColumnRegressor {
        intercept: beta[p],
        coef: beta[..p].to_vec(),
    }
}

/// Gaussian elimination with partial pivoting; falls back to zeros on a
/// singular system (cannot happen with lambda > 0 except for the intercept
/// row of an empty design, which the callers exclude).
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return vec![0.0; n];
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    x
}

fn predictor_row(values: &[f64], width: usize, row: usize, skip: usize) -> Vec<f64> {
    let base = row * width;
    let mut out = Vec::with_capacity(width - 1);
    for j in 0..width {
        if j != skip {
            out.push(values[base + j]);
        }
    }
    out
}

/// Fit the iterative imputer on `matrix` (training split) and complete it
/// in place. Observed cells are never altered.
pub fn impute(
    matrix: &TabularMatrix,
    sweeps: usize,
    seed: u64,
) -> Result<(TabularMatrix, ImputationModel), TabularError> {
    if sweeps == 0 {
        return Err(TabularError::BadSweeps(sweeps));
    }
    let (n, w) = (matrix.n_rows, matrix.width);
    let mut out = matrix.clone();

    // Column means over observed cells; errors if a column is fully missing.
    let mut means = vec![0.0; w];
    for j in 0..w {
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..n {
            if !matrix.is_missing(i, j) {
                sum += matrix.value(i, j);
                cnt += 1;
            }
        }
        if cnt == 0 {
            return Err(TabularError::AllMissing {
                col: matrix.col_names[j].clone(),
            });
        }
        means[j] = sum / cnt as f64;
    }
    for i in 0..n {
        for j in 0..w {
            if matrix.is_missing(i, j) {
                out.values[i * w + j] = means[j];
            }
        }
    }

    let has_missing: Vec<bool> = (0..w)
        .map(|j| (0..n).any(|i| matrix.is_missing(i, j)))
        .collect();
    let mut regressors: Vec<Option<ColumnRegressor>> = vec![None; w];

    for _ in 0..sweeps {
        for j in 0..w {
            if !has_missing[j] {
                continue;
            }
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for i in 0..n {
                if !matrix.is_missing(i, j) {
                    xs.push(predictor_row(&out.values, w, i, j));
                    ys.push(out.values[i * w + j]);
                }
            }
            let reg = ridge_fit(&xs, &ys, RIDGE_LAMBDA);
            for i in 0..n {
                if matrix.is_missing(i, j) {
                    let x = predictor_row(&out.values, w, i, j);
                    let pred = reg.intercept
                        + reg.coef.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
                    out.values[i * w + j] = pred;
                }
            }
            regressors[j] = Some(reg);
        }
    }

    // Indicators: one per original column that had any missing cell.
    let mut indicator_columns = Vec::new();
    out.indicators.clear();
    for block in &matrix.blocks {
        let any = (0..n).any(|i| matrix.is_missing(i, block.range.start));
        if any {
            let col: Vec<f64> = (0..n)
                .map(|i| {
                    if matrix.is_missing(i, block.range.start) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            indicator_columns.push(block.name.clone());
            out.indicators.push((block.name.clone(), col));
        }
    }

    let model = ImputationModel {
        col_names: matrix.col_names.clone(),
        col_means: means,
        regressors,
        indicator_columns,
        sweeps,
        lambda: RIDGE_LAMBDA,
        seed,
    };
    Ok((out, model))
}

/// Complete new rows with a fitted model: mean-fill, then one pass per
/// column in fitted order; indicators appended exactly as in training.
pub fn apply_imputation(
    model: &ImputationModel,
    matrix: &TabularMatrix,
) -> Result<TabularMatrix, TabularError> {
    if matrix.col_names != model.col_names {
        return Err(TabularError::SchemaDrift(format!(
            "encoded columns {:?} do not match the fitted imputer {:?}",
            matrix.col_names, model.col_names
        )));
    }
    let (n, w) = (matrix.n_rows, matrix.width);
    // Missing in a column the imputer never saw missing is schema drift:
    // the training data promised that column complete.
    for block in &matrix.blocks {
        let fitted = model.indicator_columns.contains(&block.name);
        if !fitted {
            for i in 0..n {
                if matrix.is_missing(i, block.range.start) {
                    return Err(TabularError::SchemaDrift(format!(
                        "column `{}` has missing values but had none when the imputer was fitted",
                        block.name
                    )));
                }
            }
        }
    }

    let mut out = matrix.clone();
    for i in 0..n {
        for j in 0..w {
            if matrix.is_missing(i, j) {
                out.values[i * w + j] = model.col_means[j];
            }
        }
    }
    for j in 0..w {
        let Some(reg) = &model.regressors[j] else { continue };
        for i in 0..n {
            if matrix.is_missing(i, j) {
                let x = predictor_row(&out.values, w, i, j);
                out.values[i * w + j] =
                    reg.intercept + reg.coef.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
            }
        }
    }
    out.indicators = model
        .indicator_columns
        .iter()
        .map(|name| {
            let block = matrix
                .blocks
                .iter()
                .find(|b| &b.name == name)
                .expect("fitted indicator column exists in schema");
            let col: Vec<f64> = (0..n)
                .map(|i| {
                    if matrix.is_missing(i, block.range.start) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            (name.clone(), col)
        })
        .collect();
    Ok(out)
}

/// Write a completed matrix (with indicators) as CSV.
pub fn write_completed_csv(matrix: &TabularMatrix, drop_indicators: bool) -> String {
    let names = matrix.input_names(drop_indicators);
    let mut out = names.join(",");
    out.push('\n');
    let tensor = matrix.to_model_input(drop_indicators);
    let w = tensor.shape()[1];
    for i in 0..matrix.n_rows {
        let row = &tensor.data()[i * w..(i + 1) * w];
        let mut line = String::new();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            let _ = write!(line, "{v}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_cont2() -> TabularSchema {
        TabularSchema::new(vec![
            SchemaColumn {
                name: "x".into(),
                kind: ColumnKind::Continuous,
            },
            SchemaColumn {
                name: "z".into(),
                kind: ColumnKind::Continuous,
            },
        ])
    }

    fn raw(rows: &[&[Option<f64>]]) -> Vec<RawRow> {
        rows.iter()
            .map(|r| r.iter().map(|c| c.map(|v| v.to_string())).collect())
            .collect()
    }

    #[test]
    fn sex_becomes_two_column_one_hot() {
        let schema = TabularSchema::new(vec![SchemaColumn {
            name: "sex".into(),
            kind: ColumnKind::Categorical(vec!["M".into(), "F".into()]),
        }]);
        let rows: Vec<RawRow> = vec![vec![Some("M".into())], vec![Some("F".into())]];
        let (m, _, _) = encode(&schema, &rows, None).unwrap();
        assert_eq!(m.width, 2);
        assert_eq!(&m.values, &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unknown_level_is_an_error_naming_the_level() {
        let schema = TabularSchema::new(vec![SchemaColumn {
            name: "sex".into(),
            kind: ColumnKind::Categorical(vec!["M".into(), "F".into()]),
        }]);
        let rows: Vec<RawRow> = vec![vec![Some("X".into())]];
        match encode(&schema, &rows, None).unwrap_err() {
            TabularError::UnknownLevel { level, .. } => assert_eq!(level, "X"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_column_encodes_to_zeros_with_warning() {
        let schema = TabularSchema::new(vec![SchemaColumn {
            name: "c".into(),
            kind: ColumnKind::Continuous,
        }]);
        let rows = raw(&[&[Some(5.0)], &[Some(5.0)], &[Some(5.0)]]);
        let (m, _, warnings) = encode(&schema, &rows, None).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn train_stats_standardize_test_values() {
        let schema = TabularSchema::new(vec![SchemaColumn {
            name: "c".into(),
            kind: ColumnKind::Continuous,
        }]);
        let stats = EncodeStats {
            continuous: vec![Some((10.0, 2.0))],
        };
        let rows = raw(&[&[Some(14.0)]]);
        let (m, _, _) = encode(&schema, &rows, Some(&stats)).unwrap();
        assert_eq!(m.values, vec![2.0]);
    }

    #[test]
    fn standardized_training_columns_have_zero_mean_unit_variance() {
        let schema = TabularSchema::new(vec![SchemaColumn {
            name: "c".into(),
            kind: ColumnKind::Continuous,
        }]);
        let vals: Vec<Vec<Option<String>>> = (0..50)
            .map(|i| vec![Some(format!("{}", 3.0 + 0.7 * i as f64 + ((i * i) % 11) as f64))])
            .collect();
        let (m, _, _) = encode(&schema, &vals, None).unwrap();
        let mean = m.values.iter().sum::<f64>() / m.values.len() as f64;
        let var = m.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / m.values.len() as f64;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-10, "var {var}");
    }

    #[test]
    fn complete_column_gets_no_indicator_and_is_unchanged() {
        let schema = schema_cont2();
        let rows = raw(&[
            &[Some(1.0), Some(2.0)],
            &[Some(2.0), Some(4.0)],
            &[Some(3.0), None],
            &[Some(4.0), Some(8.0)],
        ]);
        let (m, _, _) = encode(&schema, &rows, None).unwrap();
        let before_x: Vec<f64> = (0..4).map(|i| m.value(i, 0)).collect();
        let (done, model) = impute(&m, 3, 0).unwrap();
        let after_x: Vec<f64> = (0..4).map(|i| done.value(i, 0)).collect();
        assert_eq!(before_x, after_x);
        assert_eq!(model.indicator_columns, vec!["z".to_string()]);
        assert_eq!(done.indicators.len(), 1);
        assert_eq!(done.indicators[0].1, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn observed_cells_are_bit_exact_after_imputation() {
        let schema = schema_cont2();
        let rows = raw(&[
            &[Some(1.37), Some(2.11)],
            &[Some(-2.9), None],
            &[None, Some(0.55)],
            &[Some(0.13), Some(8.0)],
            &[Some(5.4), Some(-3.25)],
        ]);
        let (m, _, _) = encode(&schema, &rows, None).unwrap();
        let (done, _) = impute(&m, 4, 0).unwrap();
        for i in 0..m.n_rows {
            for j in 0..m.width {
                if !m.is_missing(i, j) {
                    assert!(m.value(i, j).to_bits() == done.value(i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn noiseless_linear_relation_is_recovered() {
        // z = 2x, one missing z; the regressor should recover it to 1e-6.
        // Ridge shrinks coefficients by ~lambda/n, so enough rows are needed
        // for the pinned lambda to reach that accuracy.
        let schema = schema_cont2();
        let mut rows = Vec::new();
        for i in 0..20_000 {
            let x = i as f64 * 0.0005 - 2.0;
            rows.push(vec![Some(format!("{x}")), Some(format!("{}", 2.0 * x))]);
        }
        rows.push(vec![Some("1.2345".to_string()), None]);
        let (m, stats, _) = encode(&schema, &rows, None).unwrap();
        let (done, model) = impute(&m, 2, 0).unwrap();
        // Undo standardization to compare in raw units.
        let (zm, zs) = stats.continuous[1].unwrap();
        let filled = done.value(20_000, 1) * zs + zm;
        assert!((filled - 2.0 * 1.2345).abs() < 1e-6, "filled {filled}");

        // apply_imputation on a fresh row with x = 5 recovers z = 10.
        let test_rows: Vec<RawRow> = vec![vec![Some("5".into()), None]];
        let (tm, _, _) = encode(&schema, &test_rows, Some(&stats)).unwrap();
        let out = apply_imputation(&model, &tm).unwrap();
        let filled = out.value(0, 1) * zs + zm;
        assert!((filled - 10.0).abs() < 1e-6, "filled {filled}");
        assert_eq!(out.indicators[0].1, vec![1.0]);
    }

    #[test]
    fn sweeps_converge_to_a_fixed_point() {
        let schema = TabularSchema::new(vec![
            SchemaColumn {
                name: "a".into(),
                kind: ColumnKind::Continuous,
            },
            SchemaColumn {
                name: "b".into(),
                kind: ColumnKind::Continuous,
            },
            SchemaColumn {
                name: "c".into(),
                kind: ColumnKind::Continuous,
            },
        ]);
        let mut rows = Vec::new();
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 32) as f64) / (u32::MAX as f64) * 4.0 - 2.0
        };
        for i in 0..200 {
            let mut row = vec![
                Some(format!("{}", next())),
                Some(format!("{}", next())),
                Some(format!("{}", next())),
            ];
            if i % 13 == 0 {
                row[1] = None;
            }
            if i % 17 == 0 {
                row[2] = None;
            }
            rows.push(row);
        }
        let (m, _, _) = encode(&schema, &rows, None).unwrap();
        let (s5, _) = impute(&m, 5, 0).unwrap();
        let (s6, _) = impute(&m, 6, 0).unwrap();
        for (a, b) in s5.values.iter().zip(&s6.values) {
            assert!((a - b).abs() < 1e-9, "sweep 5 vs 6: {a} vs {b}");
        }
    }

    #[test]
    fn indicator_sums_match_missing_counts() {
        let schema = schema_cont2();
        let rows = raw(&[
            &[Some(1.0), None],
            &[None, Some(4.0)],
            &[Some(3.0), None],
            &[Some(4.0), Some(8.0)],
            &[Some(2.0), Some(1.0)],
        ]);
        let (m, _, _) = encode(&schema, &rows, None).unwrap();
        let (done, _) = impute(&m, 2, 0).unwrap();
        for (name, col) in &done.indicators {
            let block = m.blocks.iter().find(|b| &b.name == name).unwrap();
            let count = (0..m.n_rows)
                .filter(|&i| m.is_missing(i, block.range.start))
                .count();
            assert_eq!(col.iter().sum::<f64>() as usize, count);
        }
    }

    #[test]
    fn missing_in_never_missing_column_is_schema_drift_at_apply() {
        let schema = schema_cont2();
        let rows = raw(&[
            &[Some(1.0), Some(2.0)],
            &[Some(2.0), None],
            &[Some(3.0), Some(6.0)],
        ]);
        let (m, stats, _) = encode(&schema, &rows, None).unwrap();
        let (_, model) = impute(&m, 2, 0).unwrap();
        // x never missing in training; a test row with x missing must error.
        let test_rows: Vec<RawRow> = vec![vec![None, Some("2.0".into())]];
        let (tm, _, _) = encode(&schema, &test_rows, Some(&stats)).unwrap();
        assert!(matches!(
            apply_imputation(&model, &tm).unwrap_err(),
            TabularError::SchemaDrift(_)
        ));
    }

    #[test]
    fn apply_leaves_complete_rows_unchanged() {
        let schema = schema_cont2();
        let rows = raw(&[
            &[Some(1.0), Some(2.0)],
            &[Some(2.0), None],
            &[Some(3.0), Some(6.0)],
        ]);
        let (m, stats, _) = encode(&schema, &rows, None).unwrap();
        let (_, model) = impute(&m, 2, 0).unwrap();
        let test_rows: Vec<RawRow> = vec![vec![Some("7.5".into()), Some("15.0".into())]];
        let (tm, _, _) = encode(&schema, &test_rows, Some(&stats)).unwrap();
        let out = apply_imputation(&model, &tm).unwrap();
        assert_eq!(out.values, tm.values);
    }

    #[test]
    fn all_missing_column_errors() {
        // A one-hot column needs no fit statistics, so an all-missing binary
        // column reaches the imputer (a continuous one already fails encode).
        let schema = TabularSchema::new(vec![
            SchemaColumn {
                name: "x".into(),
                kind: ColumnKind::Continuous,
            },
            SchemaColumn {
                name: "flag".into(),
                kind: ColumnKind::Binary,
            },
        ]);
        let rows: Vec<RawRow> = vec![
            vec![Some("1.0".into()), None],
            vec![Some("2.0".into()), None],
        ];
        let (m, _, _) = encode(&schema, &rows, None).unwrap();
        assert!(matches!(
            impute(&m, 1, 0).unwrap_err(),
            TabularError::AllMissing { .. }
        ));
    }

    #[test]
    fn schema_json_round_trips() {
        let schema = TabularSchema::new(vec![
            SchemaColumn {
                name: "age".into(),
                kind: ColumnKind::Continuous,
            },
            SchemaColumn {
                name: "sex".into(),
                kind: ColumnKind::Binary,
            },
            SchemaColumn {
                name: "site".into(),
                kind: ColumnKind::Categorical(vec!["a".into(), "b".into(), "c".into()]),
            },
        ]);
        let json = schema.to_json();
        let back = TabularSchema::from_json(&json).unwrap();
        assert_eq!(back.encoded_width(), schema.encoded_width());
        assert_eq!(back.columns.len(), 3);
    }

    #[test]
    fn nan_tokens_and_empty_cells_are_missing() {
        assert_eq!(parse_cell(""), None);
        assert_eq!(parse_cell("  "), None);
        assert_eq!(parse_cell("NaN"), None);
        assert_eq!(parse_cell("nan"), None);
        assert_eq!(parse_cell("NAN"), None);
        assert_eq!(parse_cell("1.5"), Some("1.5".to_string()));
    }
}
