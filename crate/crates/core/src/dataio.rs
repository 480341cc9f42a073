//! Datasets: CSV ingestion, synthetic teacher data and simple preprocessing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, NetworkParams};

/// Data matrix `X` (n samples by d features) and labels `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub name: String,
    pub rank_hint: Option<usize>,
}

/// Which CSV column holds the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelColumn {
    #[default]
    Last,
    Index(usize),
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, name: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!(
                "X has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            name: name.into(),
            rank_hint: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Numerical rank of `X`: singular values above `1e-10 * sigma_max`.
    pub fn rank(&self) -> usize {
        numerical_rank(&self.x)
    }

    /// Fills `rank_hint` from [`Dataset::rank`].
    pub fn with_rank_hint(mut self) -> Self {
        self.rank_hint = Some(self.rank());
        self
    }

    /// Subtracts the label mean.
    pub fn centered_labels(&self) -> Self {
        let mut out = self.clone();
        if let Some(mean) = self.y.mean() {
            out.y.mapv_inplace(|v| v - mean);
        }
        out
    }

    /// Scales every feature column to zero mean and unit variance. Constant
    /// columns are only centered.
    pub fn standardized_features(&self) -> Self {
        let mut out = self.clone();
        for mut col in out.x.axis_iter_mut(Axis(1)) {
            let mean = col.mean().unwrap_or(0.0);
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len().max(1) as f64;
            let sd = var.sqrt();
            col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
        }
        out
    }

    /// Row subset, preserving order of `rows`.
    pub fn select(&self, rows: &[usize], name: impl Into<String>) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            name: name.into(),
            rank_hint: None,
        }
    }

    /// Seeded shuffle split into (train, test) with `train_fraction` of the
    /// rows (rounded down, at least one) in the training part.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let n = self.n();
        if n < 2 {
            return Err(Error::InvalidArgument("need at least two rows to split".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
        let (train, test) = idx.split_at(n_train);
        Ok((
            self.select(train, format!("{}-train", self.name)),
            self.select(test, format!("{}-test", self.name)),
        ))
    }
}

pub fn numerical_rank(x: &Array2<f64>) -> usize {
    if x.is_empty() {
        return 0;
    }
    let m = nalgebra::DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]]);
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * smax).count()
}

fn parse_record(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record
        .iter()
        .map(|cell| cell.trim().parse::<f64>().ok())
        .collect()
}

/// Reads a comma-separated numeric file. A first row that does not parse as
/// numbers is treated as a header.
pub fn load_csv(path: impl AsRef<Path>, label: LabelColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: line,
            message: e.to_string(),
        })?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed = parse_record(&rec);
        let values = match parsed {
            Some(v) => v,
            None if idx == 0 => {
                width = Some(rec.len());
                continue;
            }
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    message: "cell is not a decimal number".into(),
                })
            }
        };
        match width {
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    message: format!("expected {w} columns, found {}", values.len()),
                })
            }
            None => width = Some(values.len()),
            _ => {}
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let cols = width.unwrap_or(0);
    if cols < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            message: "need at least one feature column and one label column".into(),
        });
    }
    let label_idx = match label {
        LabelColumn::Last => cols - 1,
        LabelColumn::Index(i) if i < cols => i,
        LabelColumn::Index(i) => {
            return Err(Error::InvalidArgument(format!(
                "label column {i} out of range for {cols} columns"
            )))
        }
    };
    let n = rows.len();
    let d = cols - 1;
    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut c = 0;
        for (j, v) in row.iter().enumerate() {
            if j == label_idx {
                y[i] = *v;
            } else {
                x[[i, c]] = *v;
                c += 1;
            }
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(x, y, name)
}

/// Writes features followed by the label in the last column. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (row, yi) in ds.x.outer_iter().zip(ds.y.iter()) {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        cells.push(format!("{yi:?}"));
        writeln!(w, "{}", cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sizes and seed for teacher-generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub n: usize,
    pub d: usize,
    pub m1: usize,
    pub k: usize,
    pub seed: u64,
}

impl TeacherSpec {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.m1 == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(format!(
                "teacher sizes must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Draws `X` (standard normal rows) and the teacher network from one seeded stream.
pub fn teacher_parts(spec: &TeacherSpec) -> Result<(Array2<f64>, NetworkParams)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = network::standard_normal_matrix(&mut rng, spec.n, spec.d, 1.0);
    let teacher = NetworkParams::random_init(&mut rng, spec.d, spec.m1, spec.k);
    Ok((x, teacher))
}

/// Synthetic regression data labelled by a randomly initialised parallel
/// three-layer network.
pub fn synth_teacher(spec: &TeacherSpec) -> Result<Dataset> {
    let (x, teacher) = teacher_parts(spec)?;
    from_teacher(x, &teacher, format!("teacher-n{}-d{}-s{}", spec.n, spec.d, spec.seed))
}

pub fn from_teacher(x: Array2<f64>, teacher: &NetworkParams, name: String) -> Result<Dataset> {
    let y = teacher.forward(&x)?;
    Dataset::new(x, y, name)
}
