//! Image tensors, unclamped fields, canvas initialization and raster I/O.
//!
//! Intensities live in `[0, 255]` as `f64`, stored row-major as `(y, x, c)`.
//! [`ImageTensor`] clamps on every mutation; [`Field`] is the same layout
//! without the range invariant and is used for gradients, learning-rate maps
//! and masks.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape { height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub const fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.row < self.height && p.col < self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A pixel location: `row` indexes height, `col` indexes width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub const fn new(row: usize, col: usize) -> Self {
        PixelCoord { row, col }
    }
}

impl fmt::Display for PixelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Real-valued tensor with image layout and no range constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: Shape,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(shape: Shape) -> Self {
        Field { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Field { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!("{} elements", shape.len()), format!("{} elements", data.len())));
        }
        Ok(Field { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.shape.index(row, col, channel)]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.shape.index(row, col, channel);
        self.data[i] = value;
    }

    /// Global L2 norm over every element.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Field {
        Field { shape: self.shape, data: self.data.iter().map(|v| v * factor).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn hadamard(&self, other: &Field) -> Result<Field> {
        self.check_shape(other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Field { shape: self.shape, data })
    }

    /// Sum of |value| over channels, one entry per pixel (row-major).
    pub fn abs_channel_sum(&self) -> Vec<f64> {
        self.data
            .chunks(self.shape.channels)
            .map(|px| px.iter().fold(0.0, |acc, v| acc + v.abs()))
            .collect()
    }

    pub(crate) fn check_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, self.shape));
        }
        Ok(())
    }
}

/// H×W×C intensities in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value".into()));
        }
        Ok(ImageTensor { shape, data: vec![clamp_intensity(value); shape.len()] })
    }

    /// Builds an image from raw values, clamping into `[0, 255]`.
    pub fn from_vec(shape: Shape, mut data: Vec<f64>) -> Result<Self> {
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::InvalidArgument(format!("unsupported channel count {}", shape.channels)));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!("{} elements", shape.len()), format!("{} elements", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        data.iter_mut().for_each(|v| *v = clamp_intensity(*v));
        Ok(ImageTensor { shape, data })
    }

    pub fn from_field(field: &Field) -> Result<Self> {
        Self::from_vec(field.shape, field.data.clone())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.shape.index(row, col, channel)]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.shape.index(row, col, channel);
        self.data[i] = clamp_intensity(value);
    }

    pub fn to_field(&self) -> Field {
        Field { shape: self.shape, data: self.data.clone() }
    }

    /// `self + scale * delta`, clamped. Elements where the product is exactly
    /// zero are left bit-identical.
    pub fn add_scaled(&self, delta: &Field, scale: f64) -> Result<ImageTensor> {
        delta.check_shape(self.shape)?;
        if !delta.is_finite() {
            return Err(Error::NonFinite("update".into()));
        }
        let data = self
            .data
            .iter()
            .zip(delta.data())
            .map(|(&v, &d)| {
                let step = scale * d;
                if step == 0.0 {
                    v
                } else {
                    clamp_intensity(v + step)
                }
            })
            .collect();
        Ok(ImageTensor { shape: self.shape, data })
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.shape.channels;
        let mut sums = vec![0.0; c];
        for px in self.data.chunks(c) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = self.shape.pixels().max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[inline]
pub fn clamp_intensity(v: f64) -> f64 {
    v.clamp(0.0, MAX_INTENSITY)
}

/// Per-element arithmetic mean of a collection of equally shaped images.
pub fn dataset_mean<'a, I>(images: I) -> Result<ImageTensor>
where
    I: IntoIterator<Item = &'a ImageTensor>,
{
    let mut iter = images.into_iter();
    let first = iter.next().ok_or(Error::EmptyDataset)?;
    let shape = first.shape();
    let mut sums = first.data.clone();
    let mut count = 1usize;
    for img in iter {
        if img.shape() != shape {
            return Err(Error::shape(shape, img.shape()));
        }
        for (s, v) in sums.iter_mut().zip(&img.data) {
            *s += v;
        }
        count += 1;
    }
    let n = count as f64;
    sums.iter_mut().for_each(|s| *s /= n);
    ImageTensor::from_vec(shape, sums)
}

/// `clamp(mean + U[0, noise_amplitude])`, element-wise, from a seeded stream.
pub fn init_canvas(mean: &ImageTensor, noise_amplitude: f64, seed: u64) -> Result<ImageTensor> {
    if !(noise_amplitude >= 0.0) || !noise_amplitude.is_finite() {
        return Err(Error::InvalidArgument(format!("noise amplitude must be >= 0, got {noise_amplitude}")));
    }
    if noise_amplitude == 0.0 {
        return Ok(mean.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = mean
        .data
        .iter()
        .map(|&m| clamp_intensity(m + noise_amplitude * rng.random::<f64>()))
        .collect();
    Ok(ImageTensor { shape: mean.shape, data })
}

fn quantize(v: f64) -> u8 {
    // Round half up on a value already in [0, 255].
    (clamp_intensity(v) + 0.5).floor().min(MAX_INTENSITY) as u8
}

/// Writes an 8-bit PNG (grayscale or RGB).
pub fn write_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    };
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (data, shape) = match decoded.color().channel_count() {
        1 | 2 => {
            let g = decoded.to_luma8();
            let shape = Shape::new(g.height() as usize, g.width() as usize, 1);
            (g.into_raw(), shape)
        }
        _ => {
            let rgb = decoded.to_rgb8();
            let shape = Shape::new(rgb.height() as usize, rgb.width() as usize, 3);
            (rgb.into_raw(), shape)
        }
    };
    ImageTensor::from_vec(shape, data.into_iter().map(f64::from).collect())
}

const TENSOR_MAGIC: &[u8; 8] = b"IMPRTNSR";

/// Stores an image at full `f64` precision (used for dataset means).
///
/// Layout: magic `IMPRTNSR`, then height, width, channels as little-endian
/// `u32`, then every element as a little-endian `f64`.
pub fn save_tensor(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut buf = Vec::with_capacity(20 + 8 * img.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    for d in [img.height(), img.width(), img.channels()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Short hex digest of shape and values, for fingerprint files.
pub fn tensor_digest(img: &ImageTensor) -> String {
    let mut h = Sha256::new();
    let s = img.shape();
    for d in [s.height, s.width, s.channels] {
        h.update((d as u64).to_le_bytes());
    }
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::corrupt(path, "bad tensor header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2));
    let body = &bytes[20..];
    if body.len() != shape.len() * 8 {
        return Err(Error::corrupt(path, format!("expected {} values", shape.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ImageTensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f64) -> ImageTensor {
        ImageTensor::filled(Shape::new(h, w, 1), v).unwrap()
    }

    #[test]
    fn mean_of_two_images() {
        let m = dataset_mean([&gray(4, 4, 0.0), &gray(4, 4, 100.0)]).unwrap();
        assert!(m.data().iter().all(|&v| v == 50.0));
    }

    #[test]
    fn mean_of_single_image_is_identity() {
        let img = ImageTensor::from_vec(Shape::new(2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dataset_mean([&img]).unwrap(), img);
    }

    #[test]
    fn mean_errors() {
        assert!(matches!(dataset_mean(std::iter::empty()), Err(Error::EmptyDataset)));
        let r = dataset_mean([&gray(2, 2, 0.0), &gray(3, 2, 0.0)]);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_noise_canvas_is_mean() {
        let mean = ImageTensor::from_vec(Shape::new(2, 3, 1), vec![0.0, 10.0, 20.0, 30.0, 40.0, 255.0]).unwrap();
        assert_eq!(init_canvas(&mean, 0.0, 9).unwrap(), mean);
    }

    #[test]
    fn canvas_is_deterministic() {
        let mean = gray(8, 8, 100.0);
        assert_eq!(init_canvas(&mean, 64.0, 3).unwrap(), init_canvas(&mean, 64.0, 3).unwrap());
        assert_ne!(init_canvas(&mean, 64.0, 3).unwrap(), init_canvas(&mean, 64.0, 4).unwrap());
    }

    #[test]
    fn canvas_rejects_negative_amplitude() {
        assert!(init_canvas(&gray(2, 2, 0.0), -1.0, 0).is_err());
    }

    #[test]
    fn canvas_empirical_mean_matches_monte_carlo() {
        // Independent oracle: E[clamp(128 + U)] with U ~ U[0,255], by simulation
        // on a separate generator, cross-checked against the closed form
        // (127/255)·191.5 + (128/255)·255 ≈ 223.37.
        let mut rng = rand::rngs::StdRng::seed_from_u64(12345);
        let n = 1_000_000;
        let oracle: f64 = (0..n).map(|_| (128.0 + 255.0 * rng.random::<f64>()).min(255.0)).sum::<f64>() / n as f64;
        let closed = 127.0 / 255.0 * 191.5 + 128.0 / 255.0 * 255.0;
        assert!((oracle - closed).abs() < 0.2, "oracle {oracle} vs {closed}");

        let canvas = init_canvas(&gray(224, 224, 128.0), 255.0, 1).unwrap();
        let mean = canvas.data().iter().sum::<f64>() / canvas.data().len() as f64;
        assert!((mean - oracle).abs() < 2.0, "canvas mean {mean} vs oracle {oracle}");
        assert!(canvas.data().iter().all(|&v| (128.0..=255.0).contains(&v)));
    }

    #[test]
    fn png_round_trip_extremes_and_random() {
        let dir = tempfile::tempdir().unwrap();
        for v in [0.0, 255.0] {
            let p = dir.path().join(format!("{v}.png"));
            write_image(&gray(5, 7, v), &p).unwrap();
            assert!(read_image(&p).unwrap().data().iter().all(|&x| x == v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(9, 11, 3);
        let img = ImageTensor::from_vec(shape, (0..shape.len()).map(|_| 255.0 * rng.random::<f64>()).collect()).unwrap();
        let p = dir.path().join("rgb.png");
        write_image(&img, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), shape);
        assert!(img.max_abs_diff(&back) <= 0.5);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 1);
        assert_eq!(quantize(0.49), 0);
        assert_eq!(quantize(254.5), 255);
    }

    #[test]
    fn unsupported_channels_rejected() {
        assert!(ImageTensor::from_vec(Shape::new(1, 1, 2), vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn tensor_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_vec(Shape::new(2, 2, 1), vec![0.1, 33.333, 254.9, 7.0]).unwrap();
        let p = dir.path().join("mean.tensor");
        save_tensor(&img, &p).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), img);
        std::fs::write(&p, b"IMPRTNSR").unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn add_scaled_leaves_zero_update_elements_untouched() {
        let img = ImageTensor::from_vec(Shape::new(1, 3, 1), vec![1.0, 2.0, 254.0]).unwrap();
        let delta = Field::from_vec(img.shape(), vec![0.0, 1.0, 10.0]).unwrap();
        let out = img.add_scaled(&delta, 1.0).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0, 255.0]);
    }

    proptest::proptest! {
        #[test]
        fn clamp_is_idempotent(v in -1e6f64..1e6) {
            proptest::prop_assert_eq!(clamp_intensity(clamp_intensity(v)), clamp_intensity(v));
        }

        #[test]
        fn canvas_stays_between_mean_and_max(seed in 0u64..1000, amp in 0.0f64..300.0, base in 0.0f64..255.0) {
            let mean = gray(4, 4, base);
            let c = init_canvas(&mean, amp, seed).unwrap();
            proptest::prop_assert!(c.data().iter().all(|&v| v >= base && v <= 255.0));
        }
    }
}
