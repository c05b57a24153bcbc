//! Datasets: IDX files and seeded Gaussian blobs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::harness::config::DatasetSpec;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Examples `x: [N, ...]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} examples but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        Ok(Dataset { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single example.
    pub fn example_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Gathers the listed examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let row = self.x.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn truncate(self, n: usize) -> Result<Self> {
        if n >= self.len() {
            return Ok(self);
        }
        let indices: Vec<usize> = (0..n).collect();
        let (x, labels) = self.batch(&indices)?;
        Dataset::new(x, labels)
    }
}

/// Train and test splits plus the class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: usize,
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.offset..self.offset + 4)
            .ok_or_else(|| self.fail("truncated header"))?;
        self.offset += 4;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn body(&mut self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.offset;
        if have < len {
            return Err(self.fail(format!("truncated body: expected {len} bytes, found {have}")));
        }
        let b = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(b)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32()?;
        if m != expected {
            self.offset -= 4;
            return Err(self.fail(format!("bad magic 0x{m:08x}, expected 0x{expected:08x}")));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Parses an IDX image file (`u8`, three dimensions) into
/// `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { path, bytes, offset: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(r.fail(format!("empty image set {n}x{rows}x{cols}")));
    }
    let body = r.body(n * rows * cols)?;
    let data = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX label file (`u8`, one dimension).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { path, bytes, offset: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.body(n)?.iter().map(|&l| usize::from(l)).collect())
}

/// Loads an image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let x = parse_idx_images(images_path, &read(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read(labels_path)?)?;
    if x.rows() != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!(
                "{} labels for {} images in {}",
                labels.len(),
                x.rows(),
                images_path.display()
            ),
        });
    }
    Dataset::new(x, labels)
}

/// Blob data with the centers it was drawn around.
#[derive(Clone, Debug, PartialEq)]
pub struct Blobs {
    pub splits: Splits,
    /// `[classes, dim]`.
    pub centers: Tensor,
}

/// Draws `per_class` points around each of `classes` centers and splits
/// each class into test and train parts by `test_fraction`.
pub fn gen_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    test_fraction: f64,
    center_scale: f64,
    seed: u64,
) -> Result<Blobs> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::Config(format!("blob spread must be positive, got {spread}")));
    }
    let mut rng = stream_rng(seed, Stream::DataGen, 0);
    let center_dist = Normal::new(0.0, center_scale).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(e.to_string()))?;
    let centers: Vec<f64> = (0..classes * dim).map(|_| center_dist.sample(&mut rng)).collect();

    let n_test = ((per_class as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(1, per_class.saturating_sub(1).max(1));
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for c in 0..classes {
        for k in 0..per_class {
            let point: Vec<f64> = (0..dim).map(|d| centers[c * dim + d] + noise.sample(&mut rng)).collect();
            let dst = if k < n_test { &mut test } else { &mut train };
            dst.0.extend(point);
            dst.1.push(c);
        }
    }
    let make = |(x, y): (Vec<f64>, Vec<usize>)| -> Result<Dataset> {
        let mut idx: Vec<usize> = (0..y.len()).collect();
        idx.shuffle(&mut stream_rng(seed, Stream::DataGen, 1));
        let ordered = Dataset::new(Tensor::new(vec![y.len(), dim], x)?, y)?;
        let (x, y) = ordered.batch(&idx)?;
        Dataset::new(x, y)
    };
    Ok(Blobs {
        splits: Splits {
            train: make(train)?,
            test: make(test)?,
            classes,
        },
        centers: Tensor::new(vec![classes, dim], centers)?,
    })
}

/// Loads or generates the data a config describes.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    match spec {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
            classes,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            if let Some(n) = train_limit {
                train = train.truncate(*n)?;
            }
            if let Some(n) = test_limit {
                test = test.truncate(*n)?;
            }
            if train.example_shape() != test.example_shape() {
                return Err(Error::Data(format!(
                    "train examples are {:?} but test examples are {:?}",
                    train.example_shape(),
                    test.example_shape()
                )));
            }
            let max_label = train.labels.iter().chain(&test.labels).copied().max().unwrap_or(0);
            let classes = classes.unwrap_or((max_label + 1).max(2));
            if max_label >= classes {
                return Err(Error::Data(format!("label {max_label} outside [0, {classes})")));
            }
            Ok(Splits { train, test, classes })
        }
        &DatasetSpec::Blobs {
            classes,
            dim,
            per_class,
            spread,
            test_fraction,
            center_scale,
        } => Ok(gen_blobs(classes, dim, per_class, spread, test_fraction, center_scale, seed)?.splits),
    }
}
