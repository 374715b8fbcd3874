//! Labeled datasets: a synthetic cluster generator, CSV ingestion with
//! per-dimension standardization, and the intra-class-variation ranking
//! that drives surplus-neuron allocation.
//!
//! Features are stored samples-as-columns (`dim x num_samples`). Every
//! dataset carries a train/test tag per sample; classes are dense indices
//! `0..num_classes` with the original label values kept around for export.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    split: Vec<Split>,
    /// Original label value per dense class index.
    label_names: Vec<i64>,
}

impl Dataset {
    /// Validates labels against `num_classes`, tag/sample counts, and that
    /// every class occurs in the train split.
    pub fn new(
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = features.cols();
        if labels.len() != n || split.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} samples but {} labels and {} split tags",
                n,
                labels.len(),
                split.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        let mut in_train = vec![false; num_classes];
        for (y, s) in labels.iter().zip(&split) {
            if *s == Split::Train {
                in_train[*y] = true;
            }
        }
        if let Some(missing) = in_train.iter().position(|&p| !p) {
            return Err(Error::InvalidArgument(format!(
                "class {missing} has no samples in the train split"
            )));
        }
        let label_names = (0..num_classes as i64).collect();
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
            label_names,
        })
    }

    #[inline]
    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Original label value for a dense class index.
    pub fn label_name(&self, class: usize) -> i64 {
        self.label_names[class]
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn split_features(&self, split: Split) -> DenseMatrix {
        let idx = self.split_indices(split);
        let mut out = DenseMatrix::zeros(self.dim(), idx.len());
        for (j, &src) in idx.iter().enumerate() {
            out.set_column(j, &self.features.column_vec(src));
        }
        out
    }

    pub fn split_labels(&self, split: Split) -> Vec<usize> {
        self.split_indices(split)
            .into_iter()
            .map(|i| self.labels[i])
            .collect()
    }
}

/// Seeded Gaussian clusters, one per class, centers rescaled so the minimum
/// pairwise center distance is exactly 1. The per-class standard deviation
/// is `spread * (1 + class/m)`, so higher class indices vary more. Samples
/// are split 3:1 train/test within each class.
pub fn gen_synthetic_clusters(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and 2 dimensions, got {num_classes} and {dim}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument(
            "per_class must be positive".to_string(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread must be finite and nonnegative, got {spread}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let c: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        centers.push(c);
    }
    let mut min_dist = f64::INFINITY;
    for a in 0..num_classes {
        for b in (a + 1)..num_classes {
            let d2: f64 = centers[a]
                .iter()
                .zip(&centers[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    if min_dist <= 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate seed produced coincident centers".to_string(),
        ));
    }
    for c in &mut centers {
        for v in c.iter_mut() {
            *v /= min_dist;
        }
    }

    let total = num_classes * per_class;
    let train_per_class = (per_class * 3).div_ceil(4);
    let mut features = DenseMatrix::zeros(dim, total);
    let mut labels = Vec::with_capacity(total);
    let mut split = Vec::with_capacity(total);
    let mut col = 0;
    for (class, center) in centers.iter().enumerate() {
        let sigma = spread * (1.0 + class as f64 / num_classes as f64);
        for s in 0..per_class {
            let sample: Vec<f64> = center
                .iter()
                .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.set_column(col, &sample);
            labels.push(class);
            split.push(if s < train_per_class {
                Split::Train
            } else {
                Split::Test
            });
            col += 1;
        }
    }
    Dataset::new(features, labels, num_classes, split)
}

/// Classes ranked by descending trace of the per-class feature covariance
/// over the train split; ties break toward the lower class index. The head
/// allocator hands surplus neurons to the front of this list.
pub fn class_priority(data: &Dataset) -> Result<Vec<usize>> {
    let features = data.split_features(Split::Train);
    let labels = data.split_labels(Split::Train);
    let m = data.num_classes();
    let dim = data.dim();

    let mut counts = vec![0usize; m];
    let mut means = vec![vec![0.0f64; dim]; m];
    for (j, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (d, v) in features.column(j).enumerate() {
            means[y][d] += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {empty} has no train samples"
        )));
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        for v in mean.iter_mut() {
            *v /= count as f64;
        }
    }

    let mut traces = vec![0.0f64; m];
    for (j, &y) in labels.iter().enumerate() {
        for (d, v) in features.column(j).enumerate() {
            let diff = v - means[y][d];
            traces[y] += diff * diff;
        }
    }
    for (t, &count) in traces.iter_mut().zip(&counts) {
        *t /= count as f64;
    }

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        traces[b]
            .partial_cmp(&traces[a])
            .expect("finite traces")
            .then(a.cmp(&b))
    });
    Ok(order)
}

const SPLIT_COLUMN: &str = "split";

/// Loads a numeric CSV and standardizes every feature dimension to the
/// train split's mean and standard deviation (floored at 1e-12, so constant
/// columns come out all-zero).
///
/// Layout: one integer label column (by index or header name), optionally a
/// `split` column with values `train`/`test` (header required for that; no
/// split column means everything is train), all other columns numeric
/// features. Labels are re-indexed densely from 0 in ascending order of the
/// values seen in the train split.
pub fn load_csv(path: &Path, label_column: &LabelColumn) -> Result<Dataset> {
    let mut data = load_csv_raw(path, label_column)?;
    standardize(&mut data);
    Ok(data)
}

/// [`load_csv`] without the standardization step.
pub fn load_csv_raw(path: &Path, label_column: &LabelColumn) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_csv(&bytes, label_column)
}

/// Parses CSV bytes into a dataset; the in-memory entry point behind
/// [`load_csv_raw`].
pub fn parse_csv(bytes: &[u8], label_column: &LabelColumn) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("malformed CSV: {e}"),
        })?;
        rows.push(record.iter().map(|s| s.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".to_string(),
        });
    }

    let has_header = match label_column {
        LabelColumn::Name(_) => true,
        LabelColumn::Index(_) => rows[0]
            .iter()
            .any(|cell| cell.parse::<f64>().is_err() && cell != "train" && cell != "test"),
    };
    let header: Option<&Vec<String>> = if has_header { Some(&rows[0]) } else { None };
    let width = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("ragged row: {} cells, expected {width}", row.len()),
            });
        }
    }

    let label_idx = match label_column {
        LabelColumn::Index(i) => {
            if *i >= width {
                return Err(Error::Config(format!(
                    "label column {i} out of range for {width} columns"
                )));
            }
            *i
        }
        LabelColumn::Name(name) => header
            .expect("name implies header")
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("no column named '{name}'")))?,
    };
    let split_idx = header.and_then(|h| h.iter().position(|c| c == SPLIT_COLUMN));
    if split_idx == Some(label_idx) {
        return Err(Error::Config(
            "label column and split column coincide".to_string(),
        ));
    }

    let data_rows = &rows[if has_header { 1 } else { 0 }..];
    let first_data_line = if has_header { 2 } else { 1 };
    if data_rows.is_empty() {
        return Err(Error::Parse {
            line: first_data_line,
            msg: "no data rows".to_string(),
        });
    }
    let dim = width - 1 - usize::from(split_idx.is_some());
    if dim == 0 {
        return Err(Error::Parse {
            line: first_data_line,
            msg: "no feature columns".to_string(),
        });
    }

    let n = data_rows.len();
    let mut features = DenseMatrix::zeros(dim, n);
    let mut raw_labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for (r, row) in data_rows.iter().enumerate() {
        let line = first_data_line + r;
        let mut feat = Vec::with_capacity(dim);
        for (c, cell) in row.iter().enumerate() {
            if c == label_idx {
                let label: i64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("label '{cell}' is not an integer"),
                })?;
                raw_labels.push(label);
            } else if Some(c) == split_idx {
                split.push(match cell.as_str() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("split tag '{other}' is neither train nor test"),
                        })
                    }
                });
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("cell '{cell}' is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("cell '{cell}' is not finite"),
                    });
                }
                feat.push(v);
            }
        }
        if split_idx.is_none() {
            split.push(Split::Train);
        }
        features.set_column(r, &feat);
    }

    // Dense re-indexing from the train split, ascending by raw value.
    let mut train_values: Vec<i64> = raw_labels
        .iter()
        .zip(&split)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(&v, _)| v)
        .collect();
    train_values.sort_unstable();
    train_values.dedup();
    if train_values.is_empty() {
        return Err(Error::Parse {
            line: first_data_line,
            msg: "no train rows".to_string(),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (r, &raw) in raw_labels.iter().enumerate() {
        match train_values.binary_search(&raw) {
            Ok(dense) => labels.push(dense),
            Err(_) => {
                return Err(Error::Parse {
                    line: first_data_line + r,
                    msg: format!("label {raw} appears in the test split but never in train"),
                })
            }
        }
    }

    let mut data = Dataset::new(features, labels, train_values.len(), split)?;
    data.label_names = train_values;
    Ok(data)
}

/// Writes `f0..f{d-1},label,split` with full-precision floats; a reload via
/// [`load_csv_raw`] reproduces the stored features bit-for-bit.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let dim = data.dim();
    let mut header: Vec<String> = (0..dim).map(|d| format!("f{d}")).collect();
    header.push("label".to_string());
    header.push(SPLIT_COLUMN.to_string());
    writer
        .write_record(&header)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for j in 0..data.len() {
        let mut row: Vec<String> = data.features().column(j).map(|v| format!("{v}")).collect();
        row.push(data.label_name(data.labels()[j]).to_string());
        row.push(
            match data.splits()[j] {
                Split::Train => "train",
                Split::Test => "test",
            }
            .to_string(),
        );
        writer
            .write_record(&row)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

fn standardize(data: &mut Dataset) {
    let dim = data.dim();
    let train_idx = data.split_indices(Split::Train);
    let n = train_idx.len() as f64;
    for d in 0..dim {
        let mut mean = 0.0;
        for &j in &train_idx {
            mean += data.features.get(d, j);
        }
        mean /= n;
        let mut var = 0.0;
        for &j in &train_idx {
            let diff = data.features.get(d, j) - mean;
            var += diff * diff;
        }
        let std = (var / n).sqrt().max(1e-12);
        for j in 0..data.len() {
            let v = data.features.get(d, j);
            data.features.set(d, j, (v - mean) / std);
        }
    }
}
