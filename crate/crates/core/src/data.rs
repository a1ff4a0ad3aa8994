//! Synthetic generators, IDX/CSV ingestion, and seeded batching.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GcrError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `N × input shape`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, provenance: String) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(GcrError::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(GcrError::Consistency(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if labels.len() < classes {
            return Err(GcrError::Consistency(format!(
                "{} samples cannot cover {classes} classes",
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Features and labels of the given rows.
    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `limit` samples (all when `limit >= len`).
    pub fn truncated(&self, limit: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..limit.min(self.len())).collect();
        let (features, labels) = self.subset(&idx);
        Self::new(
            features,
            labels,
            self.classes,
            format!("{}[..{}]", self.provenance, idx.len()),
        )
    }

    /// Per-class random split; each class keeps at least one training sample.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(GcrError::Config(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(&mut rng);
            let k = ((members.len() as f64) * test_fraction).round() as usize;
            let k = k.min(members.len().saturating_sub(1));
            test.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        if test.is_empty() {
            return Err(GcrError::Config("test split would be empty".into()));
        }
        let (ftr, ltr) = self.subset(&train);
        let (fte, lte) = self.subset(&test);
        let classes = self.classes;
        let test = Self {
            features: fte,
            labels: lte,
            classes,
            provenance: format!("{}:test", self.provenance),
        };
        Ok((Self::new(ftr, ltr, classes, format!("{}:train", self.provenance))?, test))
    }
}

/// Class means evenly spaced on a radius-3 circle in the first two
/// dimensions, plus isotropic Gaussian noise of scale `sigma`.
pub fn gaussian_blobs(classes: usize, per_class: usize, dims: usize, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || per_class < 1 || dims < 1 || !(sigma > 0.0) {
        return Err(GcrError::Config(format!(
            "gaussian_blobs needs classes >= 2, per_class >= 1, dims >= 1, sigma > 0 \
             (got {classes}, {per_class}, {dims}, {sigma})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| GcrError::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let angle = 2.0 * PI * c as f64 / classes as f64;
        let mut mean = vec![0.0; dims];
        mean[0] = 3.0 * angle.cos();
        if dims > 1 {
            mean[1] = 3.0 * angle.sin();
        }
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![classes * per_class, dims], data)?,
        labels,
        classes,
        format!("blobs(C={classes},per_class={per_class},d={dims},sigma={sigma},seed={seed})"),
    )
}

/// Two concentric circles of radius 1 (class 0) and 2 (class 1) with
/// Gaussian radial noise.
pub fn two_rings(per_class: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if per_class < 1 || !(noise >= 0.0) {
        return Err(GcrError::Config(format!(
            "two_rings needs per_class >= 1 and noise >= 0 (got {per_class}, {noise})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(4 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for (c, radius) in [1.0, 2.0].into_iter().enumerate() {
        for _ in 0..per_class {
            let theta = rng.random_range(0.0..2.0 * PI);
            let r = radius + noise * std.sample(&mut rng);
            data.push(r * theta.cos());
            data.push(r * theta.sin());
            labels.push(c);
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![2 * per_class, 2], data)?,
        labels,
        2,
        format!("rings(per_class={per_class},noise={noise},seed={seed})"),
    )
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(r.read_u32::<BigEndian>()?)
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled to `[0, 1]`; features have shape `N×1×H×W`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let mut ri = BufReader::new(File::open(images)?);
    let magic = read_u32(&mut ri)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(GcrError::Format(format!(
            "{}: bad image magic {magic:#010x}",
            images.display()
        )));
    }
    let (n, h, w) = (read_u32(&mut ri)? as usize, read_u32(&mut ri)? as usize, read_u32(&mut ri)? as usize);

    let provenance = format!("idx({},{})", images.display(), labels.display());
    let mut rl = BufReader::new(File::open(labels)?);
    let magic = read_u32(&mut rl)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(GcrError::Format(format!(
            "{}: bad label magic {magic:#010x}",
            labels.display()
        )));
    }
    let nl = read_u32(&mut rl)? as usize;
    if nl != n {
        return Err(GcrError::Consistency(format!(
            "{n} images but {nl} labels"
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(GcrError::Format("IDX file with a zero extent".into()));
    }

    let mut pixels = vec![0u8; n * h * w];
    ri.read_exact(&mut pixels)?;
    let mut raw_labels = vec![0u8; n];
    rl.read_exact(&mut raw_labels)?;

    let labels: Vec<usize> = raw_labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::new(
        vec![n, 1, h, w],
        pixels.into_iter().map(|p| f64::from(p) / 255.0).collect(),
    )?;
    LabeledDataset::new(
        features,
        labels,
        classes,
        provenance,
    )
}

/// Reads a headed CSV table. Every column except `label_column` is a
/// numeric feature; labels get dense ids in order of first appearance.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| GcrError::Config(format!("no column named `{label_column}`")))?;
    let width = headers.len();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2; // 1-based, after the header
        let rec = rec.map_err(csv_err)?;
        if rec.len() != width {
            return Err(GcrError::Format(format!(
                "row {row}: expected {width} fields, found {}",
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate() {
            if c == label_idx {
                let next = ids.len();
                let id = *ids.entry(cell.to_string()).or_insert_with(|| {
                    order.push(cell.to_string());
                    next
                });
                labels.push(id);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    GcrError::Format(format!("row {row}: non-numeric value `{cell}` in column {}", c + 1))
                })?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(GcrError::Format(format!("{}: no data rows", path.display())));
    }
    let d = width - 1;
    if d == 0 {
        return Err(GcrError::Format("no feature columns".into()));
    }
    let mapping: Vec<String> = order.iter().enumerate().map(|(i, l)| format!("{l}={i}")).collect();
    LabeledDataset::new(
        Tensor::new(vec![labels.len(), d], data)?,
        labels,
        ids.len(),
        format!("csv({};labels:{})", path.display(), mapping.join(",")),
    )
}

/// Writes a 2-D dataset as CSV with columns `x0..x{d-1},label`.
pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = ds.features.row_len();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> GcrError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => GcrError::Io(io),
            _ => unreachable!(),
        }
    } else {
        GcrError::Format(e.to_string())
    }
}

/// How an epoch is cut into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 128,
            seed: 0,
            drop_last: false,
        }
    }
}

/// Seeded shuffle of `0..N` cut into consecutive batches. A final short
/// batch is kept only without `drop_last` and when it has at least 2 rows.
pub fn batches(ds: &LabeledDataset, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size < 2 {
        return Err(GcrError::Config(format!(
            "batch size must be at least 2, got {}",
            plan.batch_size
        )));
    }
    if plan.batch_size > ds.len() {
        return Err(GcrError::Config(format!(
            "batch size {} exceeds dataset size {}",
            plan.batch_size,
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| c.len() == plan.batch_size || (!plan.drop_last && c.len() >= 2))
        .map(<[usize]>::to_vec)
        .collect())
}
