//! Anisotropic total variation and its subgradient.
//!
//! `TV(I) = Σ |I[y+1,x,c] - I[y,x,c]| + |I[y,x+1,c] - I[y,x,c]|` over valid
//! neighbour pairs only (no wraparound, no padding), channels independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{Field, Shape};

/// Weight of the TV step: a fixed value or calibrated once at run time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TvWeight {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl TvWeight {
    pub const AUTO: TvWeight = TvWeight::Auto(AutoTag::Auto);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    /// `"auto"` or a non-negative number.
    pub lambda1: TvWeight,
    /// The TV step runs on iterations where `i % period_k == 0`.
    pub period_k: usize,
    /// Target ratio of the first TV step's largest element to the first
    /// ascent step's largest element when `lambda1 = "auto"`.
    pub auto_ratio: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig { lambda1: TvWeight::AUTO, period_k: 1, auto_ratio: 0.1 }
    }
}

impl TvConfig {
    pub fn disabled() -> Self {
        TvConfig { lambda1: TvWeight::Fixed(0.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_k == 0 {
            return Err(Error::Config("tv.period_k must be >= 1".into()));
        }
        if let TvWeight::Fixed(l) = self.lambda1 {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("tv.lambda1 must be >= 0, got {l}")));
            }
        }
        if !(self.auto_ratio >= 0.0) {
            return Err(Error::Config("tv.auto_ratio must be >= 0".into()));
        }
        Ok(())
    }

    pub fn applies_at(&self, iteration: usize) -> bool {
        iteration.is_multiple_of(self.period_k)
    }
}

fn neighbours(shape: Shape) -> impl Iterator<Item = (usize, usize)> {
    let Shape { height, width, channels } = shape;
    (0..height).flat_map(move |y| {
        (0..width).flat_map(move |x| {
            (0..channels).flat_map(move |c| {
                let here = shape.index(y, x, c);
                let down = (y + 1 < height).then(|| (here, shape.index(y + 1, x, c)));
                let right = (x + 1 < width).then(|| (here, shape.index(y, x + 1, c)));
                down.into_iter().chain(right)
            })
        })
    })
}

pub fn tv_value(shape: Shape, data: &[f64]) -> f64 {
    neighbours(shape).map(|(a, b)| (data[b] - data[a]).abs()).sum()
}

/// Subgradient with `sign(0) = 0`.
pub fn tv_gradient(shape: Shape, data: &[f64]) -> Field {
    let mut grad = Field::zeros(shape);
    let g = grad.data_mut();
    for (a, b) in neighbours(shape) {
        let s = sign(data[b] - data[a]);
        g[b] += s;
        g[a] -= s;
    }
    grad
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_has_zero_tv_and_gradient() {
        let s = Shape::new(5, 4, 3);
        let d = vec![17.0; s.len()];
        assert_eq!(tv_value(s, &d), 0.0);
        assert!(tv_gradient(s, &d).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_by_two_hand_sum() {
        let s = Shape::new(2, 2, 1);
        assert_eq!(tv_value(s, &[0.0, 1.0, 0.0, 1.0]), 2.0);
    }

    #[test]
    fn ramp_gradient_interior_cancels() {
        let s = Shape::new(1, 3, 1);
        assert_eq!(tv_gradient(s, &[0.0, 1.0, 2.0]).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TvConfig { period_k: 0, ..TvConfig::default() }.validate().is_err());
        assert!(TvConfig { lambda1: TvWeight::Fixed(-1.0), ..TvConfig::default() }.validate().is_err());
        assert!(TvConfig::default().validate().is_ok());
        let c = TvConfig { period_k: 3, ..TvConfig::default() };
        assert!(c.applies_at(3) && c.applies_at(6) && !c.applies_at(4));
    }

    #[test]
    fn lambda_parses_auto_or_number() {
        let c: TvConfig = toml::from_str("lambda1 = \"auto\"").unwrap();
        assert_eq!(c.lambda1, TvWeight::AUTO);
        let c: TvConfig = toml::from_str("lambda1 = 0.25\nperiod_k = 2").unwrap();
        assert_eq!(c.lambda1, TvWeight::Fixed(0.25));
        assert!(toml::from_str::<TvConfig>("lambda1 = \"sometimes\"").is_err());
    }

    fn image() -> impl Strategy<Value = (Shape, Vec<f64>)> {
        (1usize..6, 1usize..6, 1usize..3).prop_flat_map(|(h, w, c)| {
            let s = Shape::new(h, w, c);
            (Just(s), proptest::collection::vec(0.0f64..255.0, s.len()))
        })
    }

    proptest! {
        #[test]
        fn non_negative_and_zero_only_when_constant((s, d) in image()) {
            let v = tv_value(s, &d);
            prop_assert!(v >= 0.0);
            let constant_per_channel = (0..s.channels).all(|c| {
                let first = d[c];
                d.iter().skip(c).step_by(s.channels).all(|&x| x == first)
            });
            prop_assert_eq!(v == 0.0, constant_per_channel);
        }

        #[test]
        fn shift_invariant_and_positively_homogeneous((s, d) in image(), shift in -50.0f64..50.0, a in 0.0f64..4.0) {
            let v = tv_value(s, &d);
            // Dyadic-free shifts may round differences; compare with a tolerance.
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            prop_assert!((tv_value(s, &shifted) - v).abs() <= 1e-9 * (1.0 + v));
            let scaled: Vec<f64> = d.iter().map(|x| a * x).collect();
            prop_assert!((tv_value(s, &scaled) - a * v).abs() <= 1e-9 * (1.0 + a * v));
        }

        #[test]
        fn small_descent_step_decreases_tv((s, d) in image()) {
            let v = tv_value(s, &d);
            prop_assume!(v > 0.0);
            // Smallest non-zero neighbour gap bounds a step that keeps every sign.
            let g = tv_gradient(s, &d);
            prop_assume!(g.max_abs() > 0.0);
            let min_gap = neighbours(s)
                .map(|(a, b)| (d[b] - d[a]).abs())
                .filter(|&x| x > 0.0)
                .fold(f64::INFINITY, f64::min);
            let step = min_gap / (8.0 * g.max_abs());
            let next: Vec<f64> = d.iter().zip(g.data()).map(|(x, gi)| x - step * gi).collect();
            prop_assert!(tv_value(s, &next) < v);
        }
    }
}
