//! Circular masks, most-activated-region search and the radius schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{Field, PixelCoord, Shape};

/// Closed Euclidean disk on an `height × width` grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircMask {
    pub center: PixelCoord,
    pub radius: f64,
    pub height: usize,
    pub width: usize,
}

impl CircMask {
    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 - self.center.row as f64;
        let dx = col as f64 - self.center.col as f64;
        dy * dy + dx * dx <= self.radius * self.radius
    }

    /// 0/1 field, the same disk on every channel.
    pub fn to_field(&self, channels: usize) -> Field {
        let shape = Shape::new(self.height, self.width, channels);
        let mut f = Field::zeros(shape);
        for row in 0..self.height {
            for col in 0..self.width {
                if self.contains(row, col) {
                    for c in 0..channels {
                        f.set(row, col, c, 1.0);
                    }
                }
            }
        }
        f
    }

    pub fn count(&self) -> usize {
        (0..self.height).flat_map(|r| (0..self.width).map(move |c| (r, c))).filter(|&(r, c)| self.contains(r, c)).count()
    }
}

pub fn circ(center: PixelCoord, radius: f64, height: usize, width: usize) -> Result<CircMask> {
    if center.row >= height || center.col >= width {
        return Err(Error::InvalidArgument(format!("center {center} outside {height}x{width}")));
    }
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be >= 0, got {radius}")));
    }
    Ok(CircMask { center, radius, height, width })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiusSchedule {
    pub r0: f64,
    pub r_max: f64,
    pub ramp_iters: usize,
    /// Disk radius used when searching for the most activated region.
    pub selection_radius: f64,
}

impl Default for RadiusSchedule {
    fn default() -> Self {
        RadiusSchedule { r0: 1.0, r_max: 150.0, ramp_iters: 150, selection_radius: 15.0 }
    }
}

impl RadiusSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 >= 0.0 && self.r0 <= self.r_max) {
            return Err(Error::Config(format!("region: need 0 <= r0 <= r_max, got {} and {}", self.r0, self.r_max)));
        }
        if self.ramp_iters == 0 {
            return Err(Error::Config("region.ramp_iters must be >= 1".into()));
        }
        if !(self.selection_radius > 0.0) {
            return Err(Error::Config("region.selection_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// Linear from `r0` at `i = 0` to `r_max` at `i = ramp_iters`, constant after.
pub fn radius_at(i: usize, sched: &RadiusSchedule) -> f64 {
    let frac = i.min(sched.ramp_iters) as f64 / sched.ramp_iters as f64;
    sched.r0 + (sched.r_max - sched.r0) * frac
}

/// Disk offsets `(dy, dx)` in row-major order.
fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Center whose disk of `radius` holds the largest summed `|lr|` (all
/// channels). Disks are clipped at the border; ties go to the smallest
/// row-major index.
///
/// Sums run over the clipped disk in row-major pixel order, channels
/// innermost, so scores are bit-identical to summing `|lr · circ|` over the
/// whole image in the same order.
pub fn most_activated_center(lr: &Field, radius: f64) -> Result<PixelCoord> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("selection radius must be > 0, got {radius}")));
    }
    let s = lr.shape();
    let offsets = disk_offsets(radius);
    let data = lr.data();
    let mut best = PixelCoord::new(0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for row in 0..s.height {
        for col in 0..s.width {
            let mut score = 0.0;
            for &(dy, dx) in &offsets {
                let (y, x) = (row as isize + dy, col as isize + dx);
                if y < 0 || x < 0 || y >= s.height as isize || x >= s.width as isize {
                    continue;
                }
                let base = s.index(y as usize, x as usize, 0);
                for v in &data[base..base + s.channels] {
                    score += v.abs();
                }
            }
            if score > best_score {
                best_score = score;
                best = PixelCoord::new(row, col);
            }
        }
    }
    Ok(best)
}

/// Element-wise product, not renormalized.
pub fn apply_mask(lr: &Field, mask: &CircMask) -> Result<Field> {
    let s = lr.shape();
    if s.height != mask.height || s.width != mask.width {
        return Err(Error::shape(format!("{}x{}", mask.height, mask.width), s));
    }
    let mut out = lr.clone();
    for row in 0..s.height {
        for col in 0..s.width {
            if !mask.contains(row, col) {
                for c in 0..s.channels {
                    out.set(row, col, c, 0.0);
                }
            }
        }
    }
    Ok(out)
}
