//! Datasets, sample partitions and parameter sets.
//!
//! Break indices are 1-based and name the last observation of the earlier
//! regime: a break `k` splits rows `1..=k` from `k+1..=T`. Internally rows
//! are addressed with 0-based half-open ranges, so break `k` becomes the
//! ranges `0..k` and `k..T`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_mat;

/// Column labels carried along for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub y: String,
    pub x: Vec<String>,
    pub z1: Vec<String>,
    pub ziv: Vec<String>,
}

impl ColumnNames {
    pub fn default_for(p1: usize, p2: usize, n_iv: usize) -> Self {
        ColumnNames {
            y: "y".into(),
            x: (1..=p2).map(|i| format!("x{i}")).collect(),
            z1: (1..=p1).map(|i| format!("z1_{i}")).collect(),
            ziv: (1..=n_iv).map(|i| format!("ziv_{i}")).collect(),
        }
    }

    /// Labels of the structural coefficients, exogenous first.
    pub fn coefficient_labels(&self) -> Vec<String> {
        self.z1.iter().chain(self.x.iter()).cloned().collect()
    }
}

/// Observed series `(y, X, Z1, Z)`.
///
/// `Z` always starts with the `Z1` columns. Construction validates the order
/// condition, the sample size, and finiteness; the type is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    names: ColumnNames,
}

impl Dataset {
    /// Builds a dataset from `Z1` and the external instruments; `Z = [Z1 | ziv]`.
    pub fn from_parts(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z1: DMatrix<f64>,
        ziv: DMatrix<f64>,
    ) -> Result<Self> {
        let names = ColumnNames::default_for(z1.ncols(), x.ncols(), ziv.ncols());
        Self::from_parts_named(y, x, z1, ziv, names)
    }

    pub fn from_parts_named(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z1: DMatrix<f64>,
        ziv: DMatrix<f64>,
        names: ColumnNames,
    ) -> Result<Self> {
        let t = y.len();
        if ziv.nrows() != t {
            return Err(Error::DimensionMismatch(format!(
                "instrument rows {} != {t}",
                ziv.nrows()
            )));
        }
        let z = if z1.ncols() == 0 {
            ziv.clone()
        } else if ziv.ncols() == 0 {
            z1.clone()
        } else {
            crate::linalg::hstack(&[&z1, &ziv])
        };
        Self::new_named(y, x, z1, z, names)
    }

    /// Builds a dataset from the full instrument matrix `Z`, whose first
    /// `p1` columns must equal `Z1`.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z1: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n_iv = z.ncols().saturating_sub(z1.ncols());
        let names = ColumnNames::default_for(z1.ncols(), x.ncols(), n_iv);
        Self::new_named(y, x, z1, z, names)
    }

    fn new_named(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z1: DMatrix<f64>,
        z: DMatrix<f64>,
        names: ColumnNames,
    ) -> Result<Self> {
        let t = y.len();
        for (name, rows) in [("X", x.nrows()), ("Z1", z1.nrows()), ("Z", z.nrows())] {
            if rows != t {
                return Err(Error::DimensionMismatch(format!("{name} has {rows} rows, y has {t}")));
            }
        }
        let (p1, p2, q) = (z1.ncols(), x.ncols(), z.ncols());
        let p = p1 + p2;
        if p2 == 0 {
            return Err(Error::DimensionMismatch("no endogenous regressors".into()));
        }
        if q < p {
            return Err(Error::DimensionMismatch(format!(
                "order condition fails: q = {q} < p1 + p2 = {p}"
            )));
        }
        if z.columns(0, p1) != z1 {
            return Err(Error::DimensionMismatch(
                "first p1 columns of Z must equal Z1".into(),
            ));
        }
        let need = 2 * p.max(q) + 2;
        if t < need {
            return Err(Error::TooFewRows { have: t, need });
        }
        for (name, bad) in [
            ("y", y.iter().any(|v| !v.is_finite())),
            ("X", x.iter().any(|v| !v.is_finite())),
            ("Z", z.iter().any(|v| !v.is_finite())),
        ] {
            if bad {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if names.x.len() != p2 || names.z1.len() != p1 || names.ziv.len() != q - p1 {
            return Err(Error::DimensionMismatch("column names do not match dimensions".into()));
        }
        let w = crate::linalg::hstack(&[&z1, &x]);
        Ok(Dataset { y, x, z1, z, w, names })
    }

    pub fn t(&self) -> usize {
        self.y.len()
    }
    pub fn p1(&self) -> usize {
        self.z1.ncols()
    }
    pub fn p2(&self) -> usize {
        self.x.ncols()
    }
    pub fn p(&self) -> usize {
        self.p1() + self.p2()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z1(&self) -> &DMatrix<f64> {
        &self.z1
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    /// Structural regressors `W = [Z1 | X]`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    /// External instruments (columns of `Z` after `Z1`).
    pub fn ziv(&self) -> DMatrix<f64> {
        self.z.columns(self.p1(), self.q() - self.p1()).into_owned()
    }

    /// Returns a copy with a column of ones prepended to `Z1` (and so to `Z`).
    pub fn with_intercept(&self) -> Result<Self> {
        let t = self.t();
        let ones = DMatrix::from_element(t, 1, 1.0);
        let z1 = crate::linalg::hstack(&[&ones, &self.z1]);
        let mut names = self.names.clone();
        names.z1.insert(0, "const".into());
        Self::from_parts_named(self.y.clone(), self.x.clone(), z1, self.ziv(), names)
    }

    /// Owned copy of a contiguous row range, revalidated.
    pub fn slice(&self, rows: Range<usize>) -> Result<Self> {
        if rows.end > self.t() || rows.start >= rows.end {
            return Err(Error::InvalidPartition(format!("row range {rows:?} out of bounds")));
        }
        let n = rows.len();
        Self::new_named(
            self.y.rows(rows.start, n).into_owned(),
            self.x.rows(rows.start, n).into_owned(),
            self.z1.rows(rows.start, n).into_owned(),
            self.z.rows(rows.start, n).into_owned(),
            self.names.clone(),
        )
    }

    pub fn view(&self, rows: Range<usize>) -> DatasetView<'_> {
        DatasetView { data: self, rows }
    }
}

/// Borrowed contiguous row range of a [`Dataset`].
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    data: &'a Dataset,
    rows: Range<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn rows(&self) -> Range<usize> {
        self.rows.clone()
    }
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
    pub fn y(&self) -> DVectorView<'a, f64> {
        self.data.y.rows(self.rows.start, self.rows.len())
    }
    pub fn x(&self) -> DMatrixView<'a, f64> {
        self.data.x.rows(self.rows.start, self.rows.len())
    }
    pub fn z1(&self) -> DMatrixView<'a, f64> {
        self.data.z1.rows(self.rows.start, self.rows.len())
    }
    pub fn z(&self) -> DMatrixView<'a, f64> {
        self.data.z.rows(self.rows.start, self.rows.len())
    }
    pub fn w(&self) -> DMatrixView<'a, f64> {
        self.data.w.rows(self.rows.start, self.rows.len())
    }
}

/// Sorted break indices plus the trimming fraction that bounds segment lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub breaks: Vec<usize>,
    pub trimming: f64,
}

impl Partition {
    pub fn new(breaks: Vec<usize>, trimming: f64) -> Self {
        Partition { breaks, trimming }
    }

    pub fn none(trimming: f64) -> Self {
        Partition { breaks: Vec::new(), trimming }
    }

    pub fn single(brk: usize, trimming: f64) -> Self {
        Partition { breaks: vec![brk], trimming }
    }

    pub fn n_regimes(&self) -> usize {
        self.breaks.len() + 1
    }

    /// Minimum admissible segment length for a sample of `t` rows with `p` parameters.
    pub fn min_segment(&self, t: usize, p: usize) -> usize {
        p.max((self.trimming * t as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self, t: usize, p: usize) -> Result<()> {
        if !(self.trimming > 0.0 && self.trimming < 0.5) {
            return Err(Error::InvalidPartition(format!(
                "trimming {} outside (0, 0.5)",
                self.trimming
            )));
        }
        let mut prev = 0usize;
        for &b in &self.breaks {
            if b == 0 || b >= t || b <= prev && prev != 0 {
                return Err(Error::InvalidPartition(format!(
                    "breaks {:?} not strictly increasing in (0, {t})",
                    self.breaks
                )));
            }
            prev = b;
        }
        let min = self.min_segment(t, p);
        for r in self.ranges(t) {
            if r.len() < min {
                return Err(Error::SegmentTooShort { len: r.len(), min });
            }
        }
        Ok(())
    }

    /// 0-based half-open row ranges of the regimes.
    pub fn ranges(&self, t: usize) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.breaks.len() + 1);
        let mut start = 0;
        for &b in &self.breaks {
            out.push(start..b);
            start = b;
        }
        out.push(start..t);
        out
    }
}

/// Splits a dataset into contiguous regime views.
pub fn split<'a>(data: &'a Dataset, part: &Partition) -> Result<Vec<DatasetView<'a>>> {
    part.validate(data.t(), data.p())?;
    Ok(part.ranges(data.t()).into_iter().map(|r| data.view(r)).collect())
}

/// Structural coefficients per regime and first-stage matrices per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    #[serde(with = "serde_mat::vectors")]
    pub theta: Vec<DVector<f64>>,
    #[serde(with = "serde_mat::matrices")]
    pub pi: Vec<DMatrix<f64>>,
    pub partition: Partition,
}

impl ParamSet {
    /// First-stage matrix in force for regime `i` (a single shared matrix is reused).
    pub fn pi_for(&self, i: usize) -> &DMatrix<f64> {
        if self.pi.len() == 1 {
            &self.pi[0]
        } else {
            &self.pi[i]
        }
    }
}

/// Role mapping for CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub y: String,
    pub x: Vec<String>,
    #[serde(default)]
    pub z1: Vec<String>,
    #[serde(default)]
    pub ziv: Vec<String>,
}

impl Schema {
    /// Infers roles from header prefixes: `y`, `x*`, `z1_*`, `ziv_*`.
    pub fn from_header(header: &[String]) -> Result<Self> {
        let mut y = None;
        let (mut x, mut z1, mut ziv) = (Vec::new(), Vec::new(), Vec::new());
        for h in header {
            if h == "y" {
                y = Some(h.clone());
            } else if h.starts_with("z1_") {
                z1.push(h.clone());
            } else if h.starts_with("ziv_") {
                ziv.push(h.clone());
            } else if h.starts_with('x') {
                x.push(h.clone());
            } else {
                return Err(Error::UnmappedColumn(h.clone()));
            }
        }
        let y = y.ok_or_else(|| Error::MissingColumn("y".into()))?;
        if x.is_empty() {
            return Err(Error::MissingColumn("x".into()));
        }
        Ok(Schema { y, x, z1, ziv })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads a dataset from a CSV file; roles come from `schema` or the header prefixes.
pub fn load_csv(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: Option<&Schema>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let schema = match schema {
        Some(s) => s.clone(),
        None => Schema::from_header(&header)?,
    };
    let index: BTreeMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let col = |name: &String| -> Result<usize> {
        index.get(name.as_str()).copied().ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let y_idx = col(&schema.y)?;
    let x_idx = schema.x.iter().map(col).collect::<Result<Vec<_>>>()?;
    let z1_idx = schema.z1.iter().map(col).collect::<Result<Vec<_>>>()?;
    let ziv_idx = schema.ziv.iter().map(col).collect::<Result<Vec<_>>>()?;
    let p = z1_idx.len() + x_idx.len();
    let q = z1_idx.len() + ziv_idx.len();
    if q < p {
        return Err(Error::DimensionMismatch(format!("order condition fails: q = {q} < p1 + p2 = {p}")));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut vals = Vec::with_capacity(header.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                row: r + 1,
                col: header.get(c).cloned().unwrap_or_default(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericCell { row: r + 1, col: header[c].clone() });
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    let t = rows.len();
    let need = 2 * p.max(q) + 2;
    if t < need {
        return Err(Error::TooFewRows { have: t, need });
    }
    let pick = |idx: &[usize]| DMatrix::from_fn(t, idx.len(), |i, j| rows[i][idx[j]]);
    let y = DVector::from_fn(t, |i, _| rows[i][y_idx]);
    let names = ColumnNames {
        y: schema.y.clone(),
        x: schema.x.clone(),
        z1: schema.z1.clone(),
        ziv: schema.ziv.clone(),
    };
    Dataset::from_parts_named(y, pick(&x_idx), pick(&z1_idx), pick(&ziv_idx), names)
}

/// Writes `y, X, Z1, ziv` with the dataset's column names.
///
/// Values use the shortest representation that parses back to the same
/// double, so `read_csv(write_csv(d)) == d` bit for bit.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let n = data.names();
    let header: Vec<&str> = std::iter::once(n.y.as_str())
        .chain(n.x.iter().map(String::as_str))
        .chain(n.z1.iter().map(String::as_str))
        .chain(n.ziv.iter().map(String::as_str))
        .collect();
    wtr.write_record(&header)?;
    let ziv = data.ziv();
    for t in 0..data.t() {
        let mut rec = vec![format!("{}", data.y()[t])];
        rec.extend(data.x().row(t).iter().map(|v| format!("{v}")));
        rec.extend(data.z1().row(t).iter().map(|v| format!("{v}")));
        rec.extend(ziv.row(t).iter().map(|v| format!("{v}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(data, file)
}
