//! Observations, CSV ingestion and deterministic K-fold partitioning.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{CdteError, Result};
use crate::rng;
use crate::util::{fmt_f64, write_atomic};

/// One unit `(x, a, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    /// Treatment indicator, 0 or 1.
    pub a: u8,
    pub y: f64,
}

impl Observation {
    pub fn new(x: Vec<f64>, a: u8, y: f64) -> Self {
        Observation { x, a, y }
    }
}

/// An immutable, validated collection of observations with a fixed
/// covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Observation>,
    d: usize,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Validates and wraps `rows`. Feature names default to `x0, x1, ...`.
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        let d = rows.first().map(|r| r.x.len()).unwrap_or(0);
        let names = (0..d).map(|j| format!("x{j}")).collect();
        Self::with_names(rows, names)
    }

    pub fn with_names(rows: Vec<Observation>, feature_names: Vec<String>) -> Result<Self> {
        let d = feature_names.len();
        for (i, r) in rows.iter().enumerate() {
            let row = i + 1;
            if r.x.len() != d {
                return Err(CdteError::Validation {
                    row,
                    message: format!("expected {d} covariates, found {}", r.x.len()),
                });
            }
            if r.a > 1 {
                return Err(CdteError::Validation {
                    row,
                    message: format!("treatment must be 0 or 1, found {}", r.a),
                });
            }
            if !r.y.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                return Err(CdteError::Validation {
                    row,
                    message: "non-finite value".to_string(),
                });
            }
        }
        Ok(Dataset { rows, d, feature_names })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Observation {
        &self.rows[i]
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.x.clone()).collect()
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.a).collect()
    }

    pub fn arm_count(&self, a: u8) -> usize {
        self.rows.iter().filter(|r| r.a == a).count()
    }

    /// Rows with the given indices, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            d: self.d,
            feature_names: self.feature_names.clone(),
        }
    }

    /// The rows of one treatment arm, in original order.
    pub fn arm(&self, a: u8) -> Dataset {
        Dataset {
            rows: self.rows.iter().filter(|r| r.a == a).cloned().collect(),
            d: self.d,
            feature_names: self.feature_names.clone(),
        }
    }

    /// A seeded random permutation of the rows. Fold assignment is by row
    /// position, so this is how randomized folds are requested.
    pub fn permuted(&self, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::rng_from_seed(seed));
        self.subset(&idx)
    }

    /// Resolves feature names to column indices.
    pub fn feature_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| CdteError::Schema(format!("unknown feature column `{n}`")))
            })
            .collect()
    }
}

/// Loads a dataset from a headered CSV file. Rows keep file order and
/// `d = feature_cols.len()`. Missing values are rejected.
pub fn load_csv(
    path: impl AsRef<Path>,
    outcome_col: &str,
    treatment_col: &str,
    feature_cols: &[String],
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(CdteError::Schema(format!("{}: missing header row", path.display())));
    }
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| CdteError::Schema(format!("missing column `{name}`")))
    };
    let y_col = find(outcome_col)?;
    let a_col = find(treatment_col)?;
    let x_cols = feature_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let parse = |record: &csv::StringRecord, row: usize, col: usize| -> Result<f64> {
        let raw = record.get(col).unwrap_or("");
        let value: f64 = raw.parse().map_err(|_| CdteError::Parse {
            row,
            column: headers[col].to_string(),
            message: format!("`{raw}` is not a number"),
        })?;
        if !value.is_finite() {
            return Err(CdteError::Parse {
                row,
                column: headers[col].to_string(),
                message: format!("`{raw}` is not finite"),
            });
        }
        Ok(value)
    };

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let y = parse(&record, row, y_col)?;
        let a_raw = parse(&record, row, a_col)?;
        let a = if a_raw == 0.0 {
            0
        } else if a_raw == 1.0 {
            1
        } else {
            return Err(CdteError::Validation {
                row,
                message: format!("treatment `{treatment_col}` must be 0 or 1, found {a_raw}"),
            });
        };
        let x = x_cols
            .iter()
            .map(|&c| parse(&record, row, c))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Observation { x, a, y });
    }
    if rows.is_empty() {
        return Err(CdteError::Schema(format!("{}: no data rows", path.display())));
    }
    Dataset::with_names(rows, feature_cols.to_vec())
}

/// Writes `data` as CSV with columns `outcome_col, treatment_col, features...`.
/// Values carry 17 significant digits so [`load_csv`] recovers them exactly.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, outcome_col: &str, treatment_col: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![outcome_col.to_string(), treatment_col.to_string()];
    header.extend(data.feature_names.iter().cloned());
    w.write_record(&header)?;
    for r in &data.rows {
        let mut rec = vec![fmt_f64(r.y), r.a.to_string()];
        rec.extend(r.x.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CdteError::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path.as_ref(), &bytes)
}

/// Fold labels `1..=K` by row position: 0-based row `i` goes to fold
/// `(i mod K) + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    labels: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fold label (1-based) of row `i`.
    pub fn fold_of(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row indices in fold `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == k).collect()
    }

    /// Row indices outside fold `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != k).collect()
    }
}

pub fn assign_folds(n: usize, k: usize) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(CdteError::config(format!("fold count must be at least 2, got {k}")));
    }
    if n < k {
        return Err(CdteError::config(format!("cannot split {n} rows into {k} folds")));
    }
    Ok(FoldAssignment {
        labels: (0..n).map(|i| i % k + 1).collect(),
        k,
    })
}

/// Splits `data` into `(train, eval)` where `eval` is fold `k`.
///
/// Both sides must hold at least two rows of each arm.
pub fn split(data: &Dataset, folds: &FoldAssignment, k: usize) -> Result<(Dataset, Dataset)> {
    if folds.len() != data.len() {
        return Err(CdteError::config(format!(
            "fold assignment covers {} rows but dataset has {}",
            folds.len(),
            data.len()
        )));
    }
    if k == 0 || k > folds.k() {
        return Err(CdteError::config(format!("fold {k} outside 1..={}", folds.k())));
    }
    let train = data.subset(&folds.complement(k));
    let eval = data.subset(&folds.members(k));
    for (side, part) in [("training", &train), ("evaluation", &eval)] {
        for a in 0..=1u8 {
            let count = part.arm_count(a);
            if count < 2 {
                return Err(CdteError::DegenerateSplit(format!(
                    "fold {k}: {side} split has {count} rows with a={a} (need at least 2)"
                )));
            }
        }
    }
    Ok((train, eval))
}
