//! IDX files (the MNIST distribution format): a big-endian header followed
//! by unsigned bytes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images with pixel values scaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl ImageBatch {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_slice(&self, i: usize) -> &[f64] {
        let n = self.pixels_per_image();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as a `[1, rows, cols]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(vec![1, self.rows, self.cols], self.image_slice(i).to_vec())
            .expect("batch dimensions are positive")
    }

    /// The first `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.count = self.count.min(n);
        self.pixels.truncate(self.count * self.pixels_per_image());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub labels: Vec<u8>,
}

impl LabelBatch {
    pub fn count(&self) -> usize {
        self.labels.len()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "bad IDX magic 0x{found:08x} (expected 0x{expected:08x})"
        )));
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize) -> Result<()> {
    match bytes.len() {
        n if n < expected => Err(Error::Truncated {
            expected,
            actual: n,
        }),
        n if n > expected => Err(Error::Format(format!(
            "{} trailing bytes after IDX payload",
            n - expected
        ))),
        _ => Ok(()),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageBatch> {
    check_len(&bytes[..bytes.len().min(16)], 16)?;
    check_magic(be_u32(bytes, 0), IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("image dimensions {rows}x{cols}")));
    }
    let payload = count
        .checked_mul(rows.saturating_mul(cols))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format("IDX header sizes overflow".into()))?;
    check_len(bytes, payload)?;
    let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(ImageBatch {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<LabelBatch> {
    check_len(&bytes[..bytes.len().min(8)], 8)?;
    check_magic(be_u32(bytes, 0), LABEL_MAGIC)?;
    let count = be_u32(bytes, 4) as usize;
    check_len(bytes, 8 + count)?;
    let labels = bytes[8..].to_vec();
    if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::Range(format!(
            "label {bad} at index {i} is not a digit"
        )));
    }
    Ok(LabelBatch { labels })
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageBatch> {
    let path = path.as_ref();
    parse_idx_images(&super::read_bytes(path)?).map_err(|e| annotate(path, e))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<LabelBatch> {
    let path = path.as_ref();
    parse_idx_labels(&super::read_bytes(path)?).map_err(|e| annotate(path, e))
}

fn annotate(path: &Path, err: Error) -> Error {
    match err {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Range(msg) => Error::Range(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Pixels are written as `round(v * 255)`.
pub fn write_idx_images(path: impl AsRef<Path>, batch: &ImageBatch) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + batch.pixels.len());
    for v in [
        IMAGE_MAGIC,
        batch.count as u32,
        batch.rows as u32,
        batch.cols as u32,
    ] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend(
        batch
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    super::write_bytes(path.as_ref(), &bytes)
}

pub fn write_idx_labels(path: impl AsRef<Path>, batch: &LabelBatch) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + batch.labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(batch.labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&batch.labels);
    super::write_bytes(path.as_ref(), &bytes)
}

/// The four standard MNIST files inside a directory, plain or gzipped.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let find = |stem: &str| -> Result<PathBuf> {
            [stem.to_string(), format!("{stem}.gz")]
                .iter()
                .map(|name| dir.join(name))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Error::io(
                        dir.join(stem),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
                    )
                })
        };
        Ok(MnistFiles {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }

    pub fn load_train(&self) -> Result<(ImageBatch, LabelBatch)> {
        load_pair(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<(ImageBatch, LabelBatch)> {
        load_pair(&self.test_images, &self.test_labels)
    }
}

fn load_pair(images: &Path, labels: &Path) -> Result<(ImageBatch, LabelBatch)> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if x.count != y.count() {
        return Err(Error::Format(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            x.count,
            labels.display(),
            y.count()
        )));
    }
    Ok((x, y))
}
