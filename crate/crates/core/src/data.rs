//! Datasets: seeded synthetic generators with a guaranteed class margin,
//! an IDX (MNIST-style) reader/writer, train/test splitting and CSV export.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!(
                "label {y} outside [0, {classes})"
            )));
        }
        Ok(Dataset { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let x = if idx.is_empty() {
            Tensor::zeros(&[0, self.dims()])
        } else {
            self.x.select_rows(idx)?
        };
        Ok(Dataset {
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// `x0,…,x{d-1},label` with full-precision values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dims() {
            let _ = write!(out, "x{j},");
        }
        out.push_str("label\n");
        for (i, y) in self.labels.iter().enumerate() {
            for v in self.x.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{y}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture,
    Concentric,
    IdxImage,
}

fn default_dims() -> usize {
    2
}
fn default_classes() -> usize {
    2
}
fn default_per_class() -> usize {
    500
}
fn default_margin() -> f64 {
    0.1
}
fn default_spread() -> f64 {
    0.05
}
fn default_box() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub samples_per_class: usize,
    /// Minimum distance between points of different classes.
    #[serde(default = "default_margin")]
    pub class_margin: f64,
    /// Within-class standard deviation (gaussian-mixture) or ring half-width
    /// (concentric).
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Fraction of training labels replaced by a different random class.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_box")]
    pub normalize_to: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
}

impl DatasetSpec {
    pub fn synthetic(kind: DatasetKind, classes: usize, samples_per_class: usize) -> Self {
        DatasetSpec {
            kind,
            dims: default_dims(),
            classes,
            samples_per_class,
            class_margin: default_margin(),
            spread: default_spread(),
            label_noise: 0.0,
            images: None,
            labels: None,
            normalize_to: default_box(),
            seed: 0,
            train_fraction: default_fraction(),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.kind != DatasetKind::IdxImage
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.normalize_to;
        if !(lo < hi) {
            return Err(Error::Config(format!("empty normalize_to [{lo}, {hi}]")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 1]".into()));
        }
        if self.is_synthetic() {
            if !(self.class_margin > 0.0) {
                return Err(Error::Config(format!(
                    "class_margin must be > 0, got {}",
                    self.class_margin
                )));
            }
            if self.classes < 2 || self.dims < 2 || self.samples_per_class == 0 {
                return Err(Error::Config(
                    "synthetic data needs ≥ 2 classes, ≥ 2 dims and ≥ 1 sample per class".into(),
                ));
            }
            if !(self.spread > 0.0) {
                return Err(Error::Config("spread must be > 0".into()));
            }
        } else if self.images.is_none() || self.labels.is_none() {
            return Err(Error::Config(
                "idx-image datasets need both `images` and `labels` paths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds (or loads) the dataset and splits it into train and test.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<SplitData> {
    spec.validate()?;
    let full = match spec.kind {
        DatasetKind::GaussianMixture => gaussian_mixture(spec)?,
        DatasetKind::Concentric => concentric(spec)?,
        DatasetKind::IdxImage => load_idx(
            spec.images.as_deref().unwrap(),
            spec.labels.as_deref().unwrap(),
            spec.normalize_to,
        )?,
    };
    let mut parts = split(&full, spec.train_fraction, rng::derive(spec.seed, &[1]))?;
    if spec.label_noise > 0.0 {
        flip_labels(&mut parts.train, spec.label_noise, rng::derive(spec.seed, &[2]));
    }
    Ok(parts)
}

/// Shuffles with `seed` and puts the first `round(fraction · n)` rows in train.
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<SplitData> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let cut = ((fraction * data.len() as f64).round() as usize).min(data.len());
    let (a, b) = idx.split_at(cut);
    Ok(SplitData {
        train: data.subset(a)?,
        test: data.subset(b)?,
    })
}

fn flip_labels(data: &mut Dataset, fraction: f64, seed: u64) {
    let mut r = rng::seeded(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut r);
    let k = (fraction * data.len() as f64).round() as usize;
    for &i in &idx[..k] {
        let shift = r.random_range(1..data.classes);
        data.labels[i] = (data.labels[i] + shift) % data.classes;
    }
}

const MAX_TRIES_PER_SAMPLE: usize = 10_000;

fn extra_dims(spec: &DatasetSpec, row: &mut [f64], r: &mut rng::Rng) {
    let [lo, hi] = spec.normalize_to;
    let noise = Normal::new((lo + hi) / 2.0, spec.spread).expect("spread > 0");
    for v in row.iter_mut().skip(2) {
        *v = noise.sample(r).clamp(lo, hi);
    }
}

fn gaussian_mixture(spec: &DatasetSpec) -> Result<Dataset> {
    let [lo, hi] = spec.normalize_to;
    let c = spec.classes;
    let center = (lo + hi) / 2.0;
    let m = spec.class_margin;
    let adjacent = m + 4.0 * spec.spread;
    let radius = adjacent / (2.0 * (PI / c as f64).sin());
    let means: Vec<[f64; 2]> = (0..c)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / c as f64;
            [center + radius * t.cos(), center + radius * t.sin()]
        })
        .collect();
    let noise = Normal::new(0.0, spec.spread).expect("spread > 0");
    let mut r = rng::seeded(spec.seed);
    let n = c * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for k in 0..c {
        for _ in 0..spec.samples_per_class {
            let mut tries = 0;
            let p = loop {
                tries += 1;
                if tries > MAX_TRIES_PER_SAMPLE {
                    return Err(Error::Config(format!(
                        "cannot place class {k} inside the box: margin {m} and spread {} are too large for {c} classes",
                        spec.spread
                    )));
                }
                let p = [means[k][0] + noise.sample(&mut r), means[k][1] + noise.sample(&mut r)];
                if p.iter().any(|&v| v < lo || v > hi) {
                    continue;
                }
                let clear = (0..c).filter(|&j| j != k).all(|j| {
                    let d = [means[k][0] - means[j][0], means[k][1] - means[j][1]];
                    let len = d[0].hypot(d[1]);
                    let mid = [
                        (means[k][0] + means[j][0]) / 2.0,
                        (means[k][1] + means[j][1]) / 2.0,
                    ];
                    ((p[0] - mid[0]) * d[0] + (p[1] - mid[1]) * d[1]) / len >= m / 2.0
                });
                if clear {
                    break p;
                }
            };
            let mut row = vec![0.0; spec.dims];
            row[..2].copy_from_slice(&p);
            extra_dims(spec, &mut row, &mut r);
            data.extend(row);
            labels.push(k);
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dims, data)?, labels, c)
}

fn concentric(spec: &DatasetSpec) -> Result<Dataset> {
    let [lo, hi] = spec.normalize_to;
    let c = spec.classes;
    let center = (lo + hi) / 2.0;
    let w = spec.spread;
    let m = spec.class_margin;
    let ring = |k: usize| w + k as f64 * (m + 2.0 * w);
    if ring(c - 1) + w > (hi - lo) / 2.0 {
        return Err(Error::Config(format!(
            "{c} rings of half-width {w} with margin {m} do not fit in [{lo}, {hi}]"
        )));
    }
    let mut r = rng::seeded(spec.seed);
    let n = c * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for k in 0..c {
        for _ in 0..spec.samples_per_class {
            let rad = r.random_range((ring(k) - w)..=(ring(k) + w));
            let phi = r.random_range(0.0..2.0 * PI);
            let mut row = vec![0.0; spec.dims];
            row[0] = center + rad * phi.cos();
            row[1] = center + rad * phi.sin();
            extra_dims(spec, &mut row, &mut r);
            data.extend(row);
            labels.push(k);
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dims, data)?, labels, c)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "{}: truncated {what} (need {n} bytes, {} left)",
                    self.file.display(),
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let got = self.u32("magic")?;
        if got != want {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "{}: magic {got:#010x}, expected {want:#010x}",
                    self.file.display()
                ),
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image/label pair; pixels are scaled from `0..=255` onto
/// `normalize_to` and each image is flattened row-major.
pub fn load_idx(images: &Path, labels: &Path, normalize_to: [f64; 2]) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let mut ic = Cursor { bytes: &ib, pos: 0, file: images };
    ic.magic(IDX_IMAGES)?;
    let n = ic.u32("image count")? as usize;
    let rows = ic.u32("row count")? as usize;
    let cols = ic.u32("column count")? as usize;
    let mut lc = Cursor { bytes: &lb, pos: 0, file: labels };
    lc.magic(IDX_LABELS)?;
    let nl = lc.u32("label count")? as usize;
    if nl != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {nl} labels"),
        });
    }
    let d = rows * cols;
    if d == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "zero-sized images".into(),
        });
    }
    let pixels = ic.take(n * d, "pixel data")?;
    let label_bytes = lc.take(n, "label data")?;
    let [lo, hi] = normalize_to;
    let x: Vec<f64> = pixels
        .iter()
        .map(|&p| lo + (hi - lo) * p as f64 / 255.0)
        .collect();
    let ys: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Tensor::matrix(n, d, x)?, ys, classes)
}

/// Writes an IDX image/label pair (`pixels` is `n × rows × cols`, row-major).
pub fn write_idx(
    images: &Path,
    labels: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    ys: &[u8],
) -> Result<()> {
    if pixels.len() != ys.len() * rows * cols {
        return Err(Error::Dimension(format!(
            "{} pixels for {} images of {rows}×{cols}",
            pixels.len(),
            ys.len()
        )));
    }
    let mut ib = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, ys.len() as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + ys.len());
    for v in [IDX_LABELS, ys.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(ys);
    crate::fsutil::write_atomic(images, &ib)?;
    crate::fsutil::write_atomic(labels, &lb)
}
