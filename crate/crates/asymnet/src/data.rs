//! Deterministic dataset providers: IDX-format parsing (optionally gzipped)
//! and a synthetic Gaussian-blob classification generator for fast tests.

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated IDX payload: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("empty dataset rejected")]
    Empty,
    #[error("label {0} out of range for 10-class data")]
    LabelOutOfRange(u8),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// An in-memory classification dataset. Inputs are row-major `N x d`, scaled
/// to `[0, 1]` when parsed from IDX pixel bytes. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers rows by index into a `(inputs, labels)` batch.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(idx.len() * self.dim);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(self.input(i));
            ys.push(self.labels[i]);
        }
        (xs, ys)
    }

    /// Splits off the last `fraction` of rows as a fixed, unshuffled
    /// validation set.
    pub fn split_validation(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_val = ((self.len() as f64) * fraction).floor() as usize;
        let n_train = self.len() - n_val;
        let head = Dataset {
            inputs: self.inputs[..n_train * self.dim].to_vec(),
            labels: self.labels[..n_train].to_vec(),
            dim: self.dim,
            num_classes: self.num_classes,
        };
        let tail = Dataset {
            inputs: self.inputs[n_train * self.dim..].to_vec(),
            labels: self.labels[n_train..].to_vec(),
            dim: self.dim,
            num_classes: self.num_classes,
        };
        (head, tail)
    }
}

fn maybe_gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

fn read_u32_be(bytes: &[u8], off: usize) -> Result<u32> {
    if bytes.len() < off + 4 {
        return Err(DataError::Truncated {
            need: off + 4,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Parsed IDX image file: `n` images of `rows x cols` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

/// Parses an IDX image file (magic `0x00000803`), gunzipping first when the
/// gzip prefix is present. Pixel bytes are scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let bytes = maybe_gunzip(bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages { n, rows, cols, pixels })
}

/// Parses an IDX label file (magic `0x00000801`) of 10-class labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let bytes = maybe_gunzip(bytes)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&bytes, 4)? as usize;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let need = 8 + n;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for &b in &bytes[8..need] {
        if b >= 10 {
            return Err(DataError::LabelOutOfRange(b));
        }
        labels.push(b as usize);
    }
    Ok(labels)
}

/// Re-encodes parsed images to IDX bytes; exact inverse of
/// [`parse_idx_images`] for byte-clean inputs.
pub fn serialize_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.n as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend(images.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn serialize_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Combines parsed image and label files into a flattened dataset.
pub fn dataset_from_idx(images: &IdxImages, labels: &[usize]) -> Result<Dataset> {
    if images.n != labels.len() {
        return Err(DataError::Truncated {
            need: images.n,
            have: labels.len(),
        });
    }
    Ok(Dataset {
        inputs: images.pixels.clone(),
        labels: labels.to_vec(),
        dim: images.rows * images.cols,
        num_classes: 10,
    })
}

/// Loads a dataset from an image file and a label file on disk.
pub fn load_idx_dataset(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    dataset_from_idx(&images, &labels)
}

/// Synthetic dataset: class `c` is sampled `Normal(mu_c, I)` with `mu_c`
/// at `separation` along the `c`-th coordinate direction (cycled).
pub fn gaussian_blobs(num_classes: usize, n_per_class: usize, d: usize, separation: f64, seed: u64) -> Dataset {
    assert!(separation > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut inputs = Vec::with_capacity(num_classes * n_per_class * d);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for c in 0..num_classes {
        for _ in 0..n_per_class {
            for j in 0..d {
                let mu = if j == c % d { separation } else { 0.0 };
                inputs.push(mu + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset {
        inputs,
        labels,
        dim: d,
        num_classes,
    }
}

/// Batch order for one epoch: a pure function of `(n, shuffle_seed, epoch)`.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
