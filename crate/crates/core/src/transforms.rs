//! Random rotation, scaling, crop and jitter applied between iterations.
//!
//! Order is fixed: rotate and scale about the image center, crop a
//! `(S - 2·pad)` window and resize it back, then add per-channel jitter and
//! clamp. Sampling is bilinear; samples falling outside the image take the
//! per-channel mean of the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{clamp_intensity, ImageTensor, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    pub enabled: bool,
    /// Degrees, `[lo, hi]`.
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Crop border in pixels; `None` means `ceil(S / 16)`.
    pub crop_pad: Option<usize>,
    /// Additive intensity offset per channel, `[lo, hi]`.
    pub jitter: [f64; 2],
    pub apply_probability: f64,
    /// Whether the masked (post-region-selection) phases transform too.
    pub in_masked_phase: bool,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            enabled: true,
            rotation_deg: [-5.0, 5.0],
            scale: [0.95, 1.05],
            crop_pad: None,
            jitter: [-10.0, 10.0],
            apply_probability: 1.0,
            in_masked_phase: false,
        }
    }
}

impl TransformParams {
    pub fn disabled() -> Self {
        TransformParams { enabled: false, ..Self::default() }
    }

    /// Jitter only. Resampling every iteration compounds: at 28 pixels the
    /// crop-and-resize zoom and the bilinear blur of rotations wipe out the
    /// ascent within a few dozen iterations.
    pub fn jitter_only() -> Self {
        TransformParams { rotation_deg: [0.0, 0.0], scale: [1.0, 1.0], crop_pad: Some(0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.rotation_deg) || !ordered(self.scale) || !ordered(self.jitter) {
            return Err(Error::Config("transforms: ranges must be finite and ordered [lo, hi]".into()));
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Config("transforms.scale must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config("transforms.apply_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn crop_pad_for(&self, shape: Shape) -> usize {
        self.crop_pad.unwrap_or_else(|| shape.height.max(shape.width).div_ceil(16))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    pub angle_deg: f64,
    pub scale: f64,
    pub crop_pad: usize,
    /// Top-left corner of the crop window, each in `[0, 2·crop_pad]`.
    pub crop_offset: (usize, usize),
    pub jitter: Vec<f64>,
}

impl TransformSample {
    pub fn identity(channels: usize) -> Self {
        TransformSample { angle_deg: 0.0, scale: 1.0, crop_pad: 0, crop_offset: (0, 0), jitter: vec![0.0; channels] }
    }

    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.scale == 1.0 && self.crop_pad == 0 && self.jitter.iter().all(|&j| j == 0.0)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Draws one transformation. Disabled or skipped (by `apply_probability`)
/// draws return the identity; the stream advances by the same amount either
/// way.
pub fn sample_transform<R: Rng + ?Sized>(params: &TransformParams, shape: Shape, rng: &mut R) -> TransformSample {
    if !params.enabled {
        return TransformSample::identity(shape.channels);
    }
    let gate = rng.random::<f64>();
    let angle_deg = uniform(rng, params.rotation_deg);
    let scale = uniform(rng, params.scale);
    let pad = params.crop_pad_for(shape).min((shape.height.min(shape.width).saturating_sub(1)) / 2);
    let crop_offset = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
    let jitter = (0..shape.channels).map(|_| uniform(rng, params.jitter)).collect();
    if gate >= params.apply_probability {
        return TransformSample::identity(shape.channels);
    }
    TransformSample { angle_deg, scale, crop_pad: pad, crop_offset, jitter }
}

/// `sin` and `cos` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter == quarter.round() {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Bilinear sample at fractional `(y, x)`; outside neighbours read `fill`.
fn bilinear(img: &ImageTensor, y: f64, x: f64, c: usize, fill: f64) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            fill
        } else {
            img.get(yy as usize, xx as usize, c)
        }
    };
    let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 { at(y0 + 1, x0) } else { at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx };
    top * (1.0 - fy) + bottom * fy
}

fn rotate_scale(img: &ImageTensor, angle_deg: f64, scale: f64) -> Result<ImageTensor> {
    let s = img.shape();
    let fill = img.channel_means();
    let (sin, cos) = sin_cos_deg(angle_deg);
    let (cy, cx) = ((s.height as f64 - 1.0) / 2.0, (s.width as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(s.len());
    for row in 0..s.height {
        for col in 0..s.width {
            // Inverse map: output pixel -> source location.
            let (dy, dx) = ((row as f64 - cy) / scale, (col as f64 - cx) / scale);
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            for (c, &f) in fill.iter().enumerate() {
                out.push(bilinear(img, sy, sx, c, f));
            }
        }
    }
    ImageTensor::from_vec(s, out)
}

fn crop_resize(img: &ImageTensor, pad: usize, offset: (usize, usize)) -> Result<ImageTensor> {
    let s = img.shape();
    let (ch, cw) = (s.height - 2 * pad, s.width - 2 * pad);
    let (ry, rx) = (ch as f64 / s.height as f64, cw as f64 / s.width as f64);
    let fill = img.channel_means();
    let mut out = Vec::with_capacity(s.len());
    for row in 0..s.height {
        for col in 0..s.width {
            let sy = offset.0 as f64 + ((row as f64 + 0.5) * ry - 0.5).clamp(0.0, ch as f64 - 1.0);
            let sx = offset.1 as f64 + ((col as f64 + 0.5) * rx - 0.5).clamp(0.0, cw as f64 - 1.0);
            for (c, &f) in fill.iter().enumerate() {
                out.push(bilinear(img, sy, sx, c, f));
            }
        }
    }
    ImageTensor::from_vec(s, out)
}

pub fn apply_transform(img: &ImageTensor, sample: &TransformSample) -> Result<ImageTensor> {
    if !(sample.scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {}", sample.scale)));
    }
    if sample.jitter.len() != img.channels() {
        return Err(Error::shape(format!("{} jitter values", img.channels()), sample.jitter.len()));
    }
    if sample.is_identity() {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    if sample.angle_deg != 0.0 || sample.scale != 1.0 {
        out = rotate_scale(&out, sample.angle_deg, sample.scale)?;
    }
    if sample.crop_pad > 0 {
        if 2 * sample.crop_pad >= img.height().min(img.width()) {
            return Err(Error::InvalidArgument(format!("crop pad {} too large", sample.crop_pad)));
        }
        out = crop_resize(&out, sample.crop_pad, sample.crop_offset)?;
    }
    if sample.jitter.iter().any(|&j| j != 0.0) {
        let s = out.shape();
        let data = out.data().iter().enumerate().map(|(i, &v)| clamp_intensity(v + sample.jitter[i % s.channels])).collect();
        out = ImageTensor::from_vec(s, data)?;
    }
    Ok(out)
}
