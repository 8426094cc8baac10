//! IDX dataset files (the MNIST distribution format), optionally gzipped.
//!
//! Header: two zero bytes, a type byte (`0x08` = unsigned byte), the number of
//! dimensions, then each dimension as a big-endian `u32`. Payload is the raw
//! bytes in row-major order.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::image_core::{ImageTensor, Shape};

const UBYTE: u8 = 0x08;

/// Labeled images with a fixed shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|i| i.shape() != first.shape()) {
                return Err(Error::shape(first.shape(), bad.shape()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.images.first().map(|i| i.shape())
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::corrupt(path, "bad IDX magic"));
    }
    if bytes[2] != UBYTE {
        return Err(Error::corrupt(path, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::corrupt(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header_len != expected {
        return Err(Error::corrupt(
            path,
            format!("payload has {} bytes, header implies {expected}", bytes.len() - header_len),
        ));
    }
    Ok((dims, header_len))
}

/// Reads an `n × rows × cols` image file into grayscale tensors.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (dims, offset) = parse_header(path, &bytes)?;
    if dims.len() != 3 {
        return Err(Error::corrupt(path, format!("expected 3 dimensions, found {}", dims.len())));
    }
    let shape = Shape::new(dims[1], dims[2], 1);
    bytes[offset..]
        .chunks_exact(shape.len().max(1))
        .map(|px| ImageTensor::from_vec(shape, px.iter().map(|&b| f64::from(b)).collect()))
        .collect()
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (dims, offset) = parse_header(path, &bytes)?;
    if dims.len() != 1 {
        return Err(Error::corrupt(path, format!("expected 1 dimension, found {}", dims.len())));
    }
    Ok(bytes[offset..].iter().map(|&b| b as usize).collect())
}

/// Writes grayscale images as an uncompressed IDX file (values rounded).
pub fn write_idx_images(images: &[ImageTensor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let shape = images.first().map(|i| i.shape()).unwrap_or(Shape::new(0, 0, 1));
    let mut buf = vec![0, 0, UBYTE, 3];
    for d in [images.len(), shape.height, shape.width] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(shape, img.shape()));
        }
        buf.extend(img.data().iter().map(|&v| v.round() as u8));
    }
    write_bytes(path, &buf)
}

pub fn write_idx_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = vec![0, 0, UBYTE, 1];
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend(labels.iter().map(|&l| l as u8));
    write_bytes(path.as_ref(), &buf)
}

fn write_bytes(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf).map_err(|e| Error::io(path, e))
}

/// Locates `<stem>` or `<stem>.gz` inside `dir`.
fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (plain or .gz)"),
    ))
}

pub fn load_split(dir: impl AsRef<Path>, prefix: &str, num_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = read_idx_images(find(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_idx_labels(find(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    Dataset::new(images, labels, num_classes)
}

/// Loads the standard MNIST `train` and `t10k` splits from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((load_split(dir, "train", 10)?, load_split(dir, "t10k", 10)?))
}
