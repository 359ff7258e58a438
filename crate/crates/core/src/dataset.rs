//! Paired response/covariate samples, the vectorization convention and CSV
//! ingestion.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One observation: response `y` (length p) and conditioning covariates `u`
/// (length d).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

/// Identity of a dataset: dimensions plus a digest of its raw bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub digest: u64,
}

/// n paired observations stored as an n×p response matrix and an n×d
/// covariate matrix. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    u: DMatrix<f64>,
    labels: Option<Vec<String>>,
    fingerprint: Fingerprint,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, u: DMatrix<f64>) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(Error::InsufficientData {
                required: 1,
                actual: 0,
            });
        }
        if y.nrows() != u.nrows() {
            return Err(Error::DimensionMismatch {
                expected: y.nrows(),
                actual: u.nrows(),
            });
        }
        if y.ncols() == 0 || u.ncols() == 0 {
            return Err(Error::config("p and d must both be at least 1"));
        }
        if let Some(pos) = y.iter().chain(u.iter()).position(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "non-finite entry at flat position {pos}"
            )));
        }
        let fingerprint = fingerprint_of(&y, &u);
        Ok(Self {
            y,
            u,
            labels: None,
            fingerprint,
        })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::InsufficientData {
            required: 1,
            actual: 0,
        })?;
        let (p, d) = (first.y.len(), first.u.len());
        for s in samples {
            if s.y.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    actual: s.y.len(),
                });
            }
            if s.u.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: s.u.len(),
                });
            }
        }
        let n = samples.len();
        let y = DMatrix::from_fn(n, p, |i, j| samples[i].y[j]);
        let u = DMatrix::from_fn(n, d, |i, j| samples[i].u[j]);
        Self::new(y, u)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                actual: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    /// n×p response matrix.
    pub fn responses(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// n×d covariate matrix.
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn response(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }

    #[inline]
    pub fn covariate(&self, i: usize, j: usize) -> f64 {
        self.u[(i, j)]
    }

    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.u.row(i).iter().copied().collect()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            y: self.y.row(i).iter().copied().collect(),
            u: self.covariate_row(i),
        }
    }

    /// Rows `rows` in the given order, as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let y = self.y.select_rows(rows);
        let u = self.u.select_rows(rows);
        let mut out = Self::new(y, u)?;
        if let Some(labels) = &self.labels {
            out.labels = Some(rows.iter().map(|&r| labels[r].clone()).collect());
        }
        Ok(out)
    }

    /// Same responses with the covariate matrix replaced.
    pub fn with_covariates(&self, u: DMatrix<f64>) -> Result<Self> {
        let mut out = Self::new(self.y.clone(), u)?;
        out.labels = self.labels.clone();
        Ok(out)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }
}

fn fingerprint_of(y: &DMatrix<f64>, u: &DMatrix<f64>) -> Fingerprint {
    let mut hasher = Sha256::new();
    for i in 0..y.nrows() {
        for v in y.row(i).iter().chain(u.row(i).iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    let bytes = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&bytes[..8]);
    Fingerprint {
        n: y.nrows(),
        p: y.ncols(),
        d: u.ncols(),
        digest: u64::from_le_bytes(head),
    }
}

/// Column-stacking convention for p×p matrices: entry (j, r), 1-based, sits at
/// position k = j + (r−1)·p of the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VecIndex {
    pub p: usize,
}

impl VecIndex {
    pub fn new(p: usize) -> Self {
        Self { p }
    }

    /// 1-based (j, r) to 1-based k.
    pub fn index(&self, j: usize, r: usize) -> usize {
        debug_assert!((1..=self.p).contains(&j) && (1..=self.p).contains(&r));
        j + (r - 1) * self.p
    }

    /// 1-based k back to 1-based (j, r).
    pub fn entry(&self, k: usize) -> (usize, usize) {
        debug_assert!((1..=self.p * self.p).contains(&k));
        ((k - 1) % self.p + 1, (k - 1) / self.p + 1)
    }

    pub fn reshape(&self, v: &[f64]) -> DMatrix<f64> {
        assert_eq!(v.len(), self.p * self.p);
        // nalgebra storage is column-major, which is exactly the stacking order.
        DMatrix::from_column_slice(self.p, self.p, v)
    }
}

/// vec(y·yᵀ) under the [`VecIndex`] convention.
pub fn vec_outer(y: &[f64]) -> Vec<f64> {
    let p = y.len();
    let mut out = Vec::with_capacity(p * p);
    for r in 0..p {
        for j in 0..p {
            out.push(y[j] * y[r]);
        }
    }
    out
}

/// Which CSV columns feed the response and covariate blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvLayout {
    pub response_cols: Vec<String>,
    pub covariate_cols: Vec<String>,
    pub date_col: Option<String>,
    /// Covariates at row t are paired with responses at row t + lag.
    pub lag: usize,
}

/// Column specs are exact header names, or `prefix*` for every header
/// starting with `prefix`.
fn resolve_columns(header: &csv::StringRecord, specs: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for spec in specs {
        if let Some(prefix) = spec.strip_suffix('*') {
            let matched: Vec<usize> = header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix))
                .map(|(i, _)| i)
                .collect();
            if matched.is_empty() {
                return Err(Error::config(format!("no column matches `{spec}`")));
            }
            out.extend(matched);
        } else {
            let idx = header
                .iter()
                .position(|h| h == spec)
                .ok_or_else(|| Error::config(format!("no column named `{spec}`")))?;
            out.push(idx);
        }
    }
    Ok(out)
}

fn parse_cell(record: &csv::StringRecord, row: usize, col: usize) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    let value: f64 = raw.parse().map_err(|_| Error::Cell {
        row,
        col: col + 1,
        message: format!("`{raw}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Cell {
            row,
            col: col + 1,
            message: "value is not finite".into(),
        });
    }
    Ok(value)
}

/// Reads a headered CSV into a [`Dataset`]. Lines starting with `#` are
/// skipped. Error locations are 1-based (row 1 is the first data row).
pub fn load_returns_csv(path: &Path, layout: &CsvLayout) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_returns_csv(file, layout).map_err(|e| match e {
        Error::Csv { message, .. } => Error::Csv {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn read_returns_csv<R: std::io::Read>(reader: R, layout: &CsvLayout) -> Result<Dataset> {
    if layout.response_cols.is_empty() {
        return Err(Error::config("no response columns (p = 0)"));
    }
    if layout.covariate_cols.is_empty() {
        return Err(Error::config("no covariate columns (d = 0)"));
    }
    let csv_err = |e: csv::Error| Error::Csv {
        path: "<reader>".into(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let ycols = resolve_columns(&header, &layout.response_cols)?;
    let ucols = resolve_columns(&header, &layout.covariate_cols)?;
    let dcol = match &layout.date_col {
        Some(name) => Some(resolve_columns(&header, std::slice::from_ref(name))?[0]),
        None => None,
    };

    let mut ys = Vec::new();
    let mut us = Vec::new();
    let mut dates = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(Error::Cell {
                row,
                col: rec.len().min(header.len()) + 1,
                message: format!("ragged row: {} fields, header has {}", rec.len(), header.len()),
            });
        }
        let y = ycols
            .iter()
            .map(|&c| parse_cell(&rec, row, c))
            .collect::<Result<Vec<_>>>()?;
        let u = ucols
            .iter()
            .map(|&c| parse_cell(&rec, row, c))
            .collect::<Result<Vec<_>>>()?;
        ys.push(y);
        us.push(u);
        if let Some(c) = dcol {
            dates.push(rec.get(c).unwrap_or("").to_string());
        }
    }

    let rows = ys.len();
    if rows <= layout.lag {
        return Err(Error::InsufficientData {
            required: layout.lag + 1,
            actual: rows,
        });
    }
    let n = rows - layout.lag;
    let (p, d) = (ycols.len(), ucols.len());
    let y = DMatrix::from_fn(n, p, |i, j| ys[i + layout.lag][j]);
    let u = DMatrix::from_fn(n, d, |i, j| us[i][j]);
    let ds = Dataset::new(y, u)?;
    if dcol.is_some() {
        let labels: Vec<String> = dates[layout.lag..].to_vec();
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("dates must be strictly increasing"));
        }
        ds.with_labels(labels)
    } else {
        Ok(ds)
    }
}

/// Writes a dataset with columns `[date,] y1..yp, u1..ud`. Values use the
/// shortest representation that parses back to the same double.
pub fn write_dataset_csv<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| Error::Csv {
        path: "<writer>".into(),
        message: e.to_string(),
    };
    let mut header: Vec<String> = Vec::new();
    if ds.labels().is_some() {
        header.push("date".into());
    }
    header.extend((1..=ds.p()).map(|j| format!("y{j}")));
    header.extend((1..=ds.d()).map(|j| format!("u{j}")));
    w.write_record(&header).map_err(map)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(labels) = ds.labels() {
            rec.push(labels[i].clone());
        }
        rec.extend(ds.responses().row(i).iter().map(|v| v.to_string()));
        rec.extend(ds.covariates().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(map)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })
}

/// Layout matching [`write_dataset_csv`] output.
pub fn default_layout(p: usize, d: usize, with_date: bool) -> CsvLayout {
    CsvLayout {
        response_cols: (1..=p).map(|j| format!("y{j}")).collect(),
        covariate_cols: (1..=d).map(|j| format!("u{j}")).collect(),
        date_col: with_date.then(|| "date".to_string()),
        lag: 0,
    }
}

/// Per-coordinate affine map of covariates onto [0, 1], fitted on training
/// data and reused for query points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCubeMap {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Coordinates whose training column was constant; they map to 0.5.
    pub constant: Vec<bool>,
}

impl UnitCubeMap {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.n() < 2 {
            return Err(Error::InsufficientData {
                required: 2,
                actual: ds.n(),
            });
        }
        let u = ds.covariates();
        let min: Vec<f64> = u.column_iter().map(|c| c.min()).collect();
        let max: Vec<f64> = u.column_iter().map(|c| c.max()).collect();
        let constant = min.iter().zip(&max).map(|(a, b)| a == b).collect();
        Ok(Self { min, max, constant })
    }

    pub fn has_constant_column(&self) -> bool {
        self.constant.iter().any(|&c| c)
    }

    pub fn apply_point(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.constant[j] {
                    0.5
                } else {
                    (v - self.min[j]) / (self.max[j] - self.min[j])
                }
            })
            .collect()
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let u = ds.covariates();
        if u.ncols() != self.min.len() {
            return Err(Error::DimensionMismatch {
                expected: self.min.len(),
                actual: u.ncols(),
            });
        }
        let mapped = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| {
            if self.constant[j] {
                0.5
            } else {
                (u[(i, j)] - self.min[j]) / (self.max[j] - self.min[j])
            }
        });
        ds.with_covariates(mapped)
    }
}

/// Rescales every covariate column into [0, 1] by its observed range. Returns
/// the map so query points can be transformed identically.
pub fn map_to_unit_cube(ds: &Dataset) -> Result<(Dataset, UnitCubeMap)> {
    let map = UnitCubeMap::fit(ds)?;
    if map.has_constant_column() {
        log::warn!("constant covariate column mapped to 0.5");
    }
    Ok((map.apply(ds)?, map))
}
