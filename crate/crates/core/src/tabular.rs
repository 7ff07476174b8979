//! Tabular preprocessing: schema fitting, offset encoding of categoricals,
//! z-score normalization of numerics (the visit interval Δt is an ordinary
//! numeric column, ordered last), learned embeddings, and assembly of the
//! fused classifier input sequence.
//!
//! Conventions:
//! - Population standard deviation for z-scores.
//! - Zero-variance numeric columns are dropped at fit time and reported.
//! - Missing values: numerics (including Δt) impute to the training mean,
//!   which z-scores to exactly 0; categoricals map to a per-column reserved
//!   "unknown" code appended after the observed codes. The unknown slot is
//!   reserved only for columns that had missing values in the fit set.
//! - Categorical CSV cells hold nonnegative integer codes; an empty cell is a
//!   missing value.

use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use gfem_autodiff::{Arr, Var};

use crate::error::{GfemError, Result};

/// Declared column layout, parallel to [`Record`] vectors. Loaded from the
/// sidecar `schema.json` next to a cohort table CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDecl {
    pub categorical: Vec<String>,
    pub numeric: Vec<String>,
    /// Name of the Δt column (days between the paired visits).
    pub interval: String,
    pub embedding_dim: usize,
}

impl ColumnDecl {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GfemError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GfemError::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("decl serializes");
        std::fs::write(path, text).map_err(|e| GfemError::io(path, e))
    }
}

/// One visit-pair's tabular data. `None` marks a missing value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub categorical_values: Vec<Option<u32>>,
    pub numeric_values: Vec<Option<f64>>,
    /// Days between the two visits; imputed from the training mean if absent.
    pub delta_t: Option<f64>,
}

impl Record {
    /// Convenience constructor for fully observed rows.
    pub fn complete(cats: &[u32], nums: &[f64], delta_t: f64) -> Self {
        Self {
            categorical_values: cats.iter().copied().map(Some).collect(),
            numeric_values: nums.iter().copied().map(Some).collect(),
            delta_t: Some(delta_t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatColumn {
    pub name: String,
    /// Observed cardinality (max code + 1 over the fit set).
    pub cardinality: usize,
    /// Reserved code for missing values, if the fit set had any. Always equal
    /// to `cardinality` when present (the slot appended after observed codes).
    pub unknown_code: Option<usize>,
}

impl CatColumn {
    /// Table rows this column occupies: observed codes plus the unknown slot.
    pub fn effective_cardinality(&self) -> usize {
        self.cardinality + usize::from(self.unknown_code.is_some())
    }
}

/// Where a retained numeric column reads its raw value from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NumSource {
    /// Index into `Record::numeric_values`.
    Column(usize),
    /// The `Record::delta_t` field.
    Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumColumn {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub source: NumSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub categorical_columns: Vec<CatColumn>,
    /// Retained numeric columns in declared order, Δt last.
    pub numeric_columns: Vec<NumColumn>,
    pub interval_column: String,
    pub embedding_dim: usize,
    /// Training-set mean Δt in days, used to impute missing intervals.
    pub interval_mean_days: f64,
}

impl TabularSchema {
    pub fn n_categorical(&self) -> usize {
        self.categorical_columns.len()
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_columns.len()
    }

    /// Total embedding-table rows across all categorical columns.
    pub fn total_cat_codes(&self) -> usize {
        self.categorical_columns
            .iter()
            .map(|c| c.effective_cardinality())
            .sum()
    }

    /// Token count contributed by the table (n categorical + m numeric).
    pub fn n_tokens(&self) -> usize {
        self.n_categorical() + self.n_numeric()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rows_seen: usize,
    /// (column name, the constant value) for each dropped zero-variance column.
    pub dropped_numeric: Vec<(String, f64)>,
    /// Categorical columns that received a reserved unknown code.
    pub unknown_columns: Vec<String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Compute per-column statistics on training rows. Zero-variance numeric
/// columns are dropped and reported; a zero-variance Δt column is an error
/// because the interval must survive the fit.
pub fn fit_schema(rows: &[Record], decl: &ColumnDecl) -> Result<(TabularSchema, FitReport)> {
    if rows.len() < 2 {
        return Err(GfemError::InvalidData(format!(
            "schema fit needs >= 2 rows, got {}",
            rows.len()
        )));
    }
    if decl.embedding_dim == 0 {
        return Err(GfemError::InvalidConfig("embedding_dim must be > 0".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.categorical_values.len() != decl.categorical.len()
            || row.numeric_values.len() != decl.numeric.len()
        {
            return Err(GfemError::InvalidData(format!(
                "row {i} has {}/{} cat/num values, declared {}/{}",
                row.categorical_values.len(),
                row.numeric_values.len(),
                decl.categorical.len(),
                decl.numeric.len()
            )));
        }
        for v in row.numeric_values.iter().flatten() {
            if !v.is_finite() {
                return Err(GfemError::InvalidData(format!("non-finite value in row {i}")));
            }
        }
        if let Some(dt) = row.delta_t {
            if !dt.is_finite() {
                return Err(GfemError::InvalidData(format!("non-finite delta_t in row {i}")));
            }
        }
    }

    let mut report = FitReport {
        rows_seen: rows.len(),
        ..FitReport::default()
    };

    let mut categorical_columns = Vec::with_capacity(decl.categorical.len());
    for (j, name) in decl.categorical.iter().enumerate() {
        let mut max_code: Option<u32> = None;
        let mut any_missing = false;
        for row in rows {
            match row.categorical_values[j] {
                Some(c) => max_code = Some(max_code.map_or(c, |m| m.max(c))),
                None => any_missing = true,
            }
        }
        let cardinality = match max_code {
            Some(m) => m as usize + 1,
            None => {
                return Err(GfemError::InvalidData(format!(
                    "categorical column '{name}' is entirely missing"
                )))
            }
        };
        let unknown_code = any_missing.then_some(cardinality);
        if any_missing {
            report.unknown_columns.push(name.clone());
        }
        categorical_columns.push(CatColumn {
            name: name.clone(),
            cardinality,
            unknown_code,
        });
    }

    let mut numeric_columns = Vec::new();
    for (i, name) in decl.numeric.iter().enumerate() {
        let observed: Vec<f64> = rows.iter().filter_map(|r| r.numeric_values[i]).collect();
        if observed.is_empty() {
            return Err(GfemError::InvalidData(format!(
                "numeric column '{name}' is entirely missing"
            )));
        }
        let (mean, std) = mean_std(&observed);
        if std == 0.0 {
            report.dropped_numeric.push((name.clone(), mean));
            continue;
        }
        numeric_columns.push(NumColumn {
            name: name.clone(),
            mean,
            std,
            source: NumSource::Column(i),
        });
    }

    let intervals: Vec<f64> = rows.iter().filter_map(|r| r.delta_t).collect();
    if intervals.is_empty() {
        return Err(GfemError::InvalidData(
            "no training row carries a delta_t value".into(),
        ));
    }
    let (dt_mean, dt_std) = mean_std(&intervals);
    if dt_std == 0.0 {
        return Err(GfemError::InvalidData(format!(
            "interval column '{}' has zero variance over the fit set",
            decl.interval
        )));
    }
    numeric_columns.push(NumColumn {
        name: decl.interval.clone(),
        mean: dt_mean,
        std: dt_std,
        source: NumSource::Interval,
    });

    Ok((
        TabularSchema {
            categorical_columns,
            numeric_columns,
            interval_column: decl.interval.clone(),
            embedding_dim: decl.embedding_dim,
            interval_mean_days: dt_mean,
        },
        report,
    ))
}

/// Shift column j's code by the summed effective cardinalities of columns
/// 0..j, making codes globally unique across columns. Missing values take the
/// column's reserved unknown code.
pub fn offset_encode(record: &Record, schema: &TabularSchema) -> Result<Vec<usize>> {
    if record.categorical_values.len() != schema.n_categorical() {
        return Err(GfemError::ShapeMismatch {
            context: "offset_encode categorical values".into(),
            expected: vec![schema.n_categorical()],
            actual: vec![record.categorical_values.len()],
        });
    }
    let mut out = Vec::with_capacity(schema.n_categorical());
    let mut offset = 0usize;
    for (col, value) in schema.categorical_columns.iter().zip(&record.categorical_values) {
        let code = match value {
            Some(c) => {
                let c = *c as usize;
                if c >= col.cardinality {
                    return Err(GfemError::InvalidData(format!(
                        "code {c} out of range for column '{}' (cardinality {})",
                        col.name, col.cardinality
                    )));
                }
                c
            }
            None => col.unknown_code.ok_or_else(|| {
                GfemError::InvalidData(format!(
                    "missing value in column '{}' but the fit set had none",
                    col.name
                ))
            })?,
        };
        out.push(offset + code);
        offset += col.effective_cardinality();
    }
    Ok(out)
}

/// Z-score the retained numeric columns with training statistics, in schema
/// order (Δt last). Missing values impute to the training mean, i.e. 0.
pub fn normalize_numeric(record: &Record, schema: &TabularSchema) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(schema.n_numeric());
    for col in &schema.numeric_columns {
        let raw = match col.source {
            NumSource::Column(i) => *record.numeric_values.get(i).ok_or_else(|| {
                GfemError::InvalidData(format!(
                    "record has {} numeric values; column '{}' needs index {i}",
                    record.numeric_values.len(),
                    col.name
                ))
            })?,
            NumSource::Interval => record.delta_t,
        };
        let value = match raw {
            Some(v) if !v.is_finite() => {
                return Err(GfemError::NonFinite {
                    part: format!("numeric column '{}'", col.name),
                    value: v,
                })
            }
            Some(v) => v,
            None => col.mean, // impute -> z-score 0
        };
        out.push((value - col.mean) / col.std);
    }
    Ok(out)
}

/// Training-set mean Δt in days, the imputation value for inference rows
/// lacking an interval.
pub fn impute_interval(train_rows: &[Record]) -> Result<f64> {
    let intervals: Vec<f64> = train_rows.iter().filter_map(|r| r.delta_t).collect();
    if intervals.is_empty() {
        return Err(GfemError::InvalidData(
            "impute_interval: no training row carries delta_t".into(),
        ));
    }
    Ok(intervals.iter().sum::<f64>() / intervals.len() as f64)
}

/// Token i = table[encoded[i]] + bias[i]: a row lookup plus per-column bias.
/// `table` is [total_cat_codes, d], `bias` is [n, d].
pub fn embed_categorical(table: &Var, bias: &Var, encoded: &[usize]) -> Var {
    let lookup = Var::embedding(table, encoded);
    lookup.add(bias)
}

/// Token i = x_i * w[i] + b[i], affine in the scalar input. `x` is [m, 1];
/// `w`, `b` are [m, d].
pub fn embed_numeric(x: &Var, w: &Var, b: &Var) -> Var {
    let m = {
        let s = x.shape();
        assert_eq!(s.len(), 2, "embed_numeric expects x as [m, 1]");
        assert_eq!(s[1], 1, "embed_numeric expects x as [m, 1]");
        s[0]
    };
    let d = w.shape()[1];
    assert_eq!(w.shape()[0], m, "weight rows must match value count");
    let ones = x.tape().leaf(Arr::ones(IxDyn(&[1, d])));
    x.matmul(&ones).mul(w).add(b)
}

/// Stack [proj(x_LMP); proj(x_LPP); table tokens]: a single shared linear
/// projection maps both modalities' patch tokens into the embedding space.
pub fn assemble_sequence(
    lmp: &Var,
    lpp: &Var,
    table_tokens: &Var,
    proj_w: &Var,
    proj_b: &Var,
) -> Result<Var> {
    let (ln, ld) = (lmp.shape()[0], lmp.shape()[1]);
    let (pn, pd) = (lpp.shape()[0], lpp.shape()[1]);
    if ln != pn || ld != pd {
        return Err(GfemError::ShapeMismatch {
            context: "assemble_sequence modality patch sequences".into(),
            expected: vec![ln, ld],
            actual: vec![pn, pd],
        });
    }
    let d = proj_w.shape()[1];
    if table_tokens.shape()[1] != d {
        return Err(GfemError::ShapeMismatch {
            context: "assemble_sequence table tokens".into(),
            expected: vec![table_tokens.shape()[0], d],
            actual: table_tokens.shape(),
        });
    }
    if ln == 0 {
        // Tabular-only ablation: no patch rows to project.
        return Ok(table_tokens.clone());
    }
    let proj_lmp = lmp.matmul(proj_w).add_row_bias(proj_b);
    let proj_lpp = lpp.matmul(proj_w).add_row_bias(proj_b);
    Ok(Var::concat_rows(&[
        proj_lmp,
        proj_lpp,
        table_tokens.clone(),
    ]))
}

/// Parse the cohort table CSV (reserved columns `subject_id`, `exam_date`,
/// `delta_t_days`, `label`; all others declared in the sidecar). Returns rows
/// in file order.
pub struct CohortTable {
    pub subject_ids: Vec<String>,
    pub exam_dates: Vec<String>,
    pub labels: Vec<u8>,
    pub records: Vec<Record>,
}

pub fn load_table_csv(path: &Path, decl: &ColumnDecl) -> Result<CohortTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| GfemError::csv(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| GfemError::csv(path, e))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            GfemError::InvalidData(format!("column '{name}' missing from {}", path.display()))
        })
    };
    let subject_idx = col_index("subject_id")?;
    let date_idx = col_index("exam_date")?;
    let dt_idx = col_index("delta_t_days")?;
    let label_idx = col_index("label")?;
    let cat_idx: Vec<usize> = decl
        .categorical
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let num_idx: Vec<usize> = decl
        .numeric
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;

    let mut table = CohortTable {
        subject_ids: Vec::new(),
        exam_dates: Vec::new(),
        labels: Vec::new(),
        records: Vec::new(),
    };
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| GfemError::csv(path, e))?;
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let parse_opt_u32 = |i: usize, what: &str| -> Result<Option<u32>> {
            let c = cell(i);
            if c.is_empty() {
                return Ok(None);
            }
            c.parse::<u32>().map(Some).map_err(|_| {
                GfemError::InvalidData(format!(
                    "row {line}: {what} cell '{c}' is not a nonnegative integer code"
                ))
            })
        };
        let parse_opt_f64 = |i: usize, what: &str| -> Result<Option<f64>> {
            let c = cell(i);
            if c.is_empty() {
                return Ok(None);
            }
            c.parse::<f64>().map(Some).map_err(|_| {
                GfemError::InvalidData(format!("row {line}: {what} cell '{c}' is not numeric"))
            })
        };

        let label = cell(label_idx).parse::<u8>().map_err(|_| {
            GfemError::InvalidData(format!("row {line}: label '{}' not 0/1", cell(label_idx)))
        })?;
        if label > 1 {
            return Err(GfemError::InvalidData(format!(
                "row {line}: label {label} not 0/1"
            )));
        }
        table.subject_ids.push(cell(subject_idx).to_string());
        table.exam_dates.push(cell(date_idx).to_string());
        table.labels.push(label);
        table.records.push(Record {
            categorical_values: cat_idx
                .iter()
                .map(|&i| parse_opt_u32(i, "categorical"))
                .collect::<Result<_>>()?,
            numeric_values: num_idx
                .iter()
                .map(|&i| parse_opt_f64(i, "numeric"))
                .collect::<Result<_>>()?,
            delta_t: parse_opt_f64(dt_idx, "delta_t_days")?,
        });
    }
    if table.records.is_empty() {
        return Err(GfemError::InvalidData(format!(
            "no data rows in {}",
            path.display()
        )));
    }
    Ok(table)
}
