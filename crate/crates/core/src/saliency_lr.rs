//! Saliency-driven per-pixel learning rate.
//!
//! Each iteration `i ≥ 1` folds the unit-normalized input gradient into a
//! cumulative state
//!
//! ```text
//! cum_i = cum_{i-1} · i + C_i · g_i / ‖g_i‖      C_i = C2 · i / t  (i < t),  C2  (i ≥ t)
//! ```
//!
//! and the learning-rate map is `cum_i / ‖cum_i‖` (global L2 norms). The map
//! used at iteration `i` is the one built from the state after `i - 1`; the
//! first iteration uses a uniform map.
//!
//! The literal recurrence grows factorially (`cum_170` already overflows an
//! `f64`), so the state is held as `values · exp(log_scale)` and only the
//! direction is ever materialized at large scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::{Field, Shape};

/// Norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Rescale stored values once their norm exceeds this.
const RESCALE_ABOVE: f64 = 1e150;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// `cum_{i-1} · i + C · ĝ`.
    Literal,
    /// `(cum_{i-1} · (i - 1) + C · ĝ) / i`.
    RunningAverage,
}

/// How the ascent step consumes the (signed) map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSignMode {
    Signed,
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampSchedule {
    pub c2: f64,
    pub t: usize,
    pub accumulation_mode: AccumulationMode,
    pub lr_sign_mode: LrSignMode,
}

impl Default for RampSchedule {
    fn default() -> Self {
        RampSchedule {
            c2: 4.0,
            t: 150,
            accumulation_mode: AccumulationMode::Literal,
            lr_sign_mode: LrSignMode::Magnitude,
        }
    }
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c2 > 0.0) || !self.c2.is_finite() {
            return Err(Error::Config(format!("saliency.c2 must be > 0, got {}", self.c2)));
        }
        if self.t == 0 {
            return Err(Error::Config("saliency.t must be >= 1".into()));
        }
        Ok(())
    }
}

/// `C2 · i / t` below `t`, `C2` from `t` on.
pub fn ramp_coefficient(i: usize, sched: &RampSchedule) -> f64 {
    if i < sched.t {
        sched.c2 * i as f64 / sched.t as f64
    } else {
        sched.c2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeGradient {
    values: Field,
    log_scale: f64,
    iteration: usize,
}

impl CumulativeGradient {
    pub fn zero(shape: Shape) -> Self {
        CumulativeGradient { values: Field::zeros(shape), log_scale: 0.0, iteration: 0 }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn shape(&self) -> Shape {
        self.values.shape()
    }

    /// True state values; may overflow to infinity for long literal runs.
    pub fn values(&self) -> Field {
        self.values.scale(self.log_scale.exp())
    }

    /// Stored values, equal to the true state up to a positive factor.
    pub fn direction(&self) -> &Field {
        &self.values
    }

    /// Natural log of the factor between [`Self::direction`] and the state.
    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }
}

/// Applies one step of the recurrence for iteration `prev.iteration + 1`.
///
/// A gradient with norm below [`DEGENERATE_NORM`] contributes nothing.
pub fn update_cumulative(
    prev: &CumulativeGradient,
    grad: &Field,
    sched: &RampSchedule,
) -> Result<CumulativeGradient> {
    grad.check_shape(prev.shape())?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let i = prev.iteration + 1;
    let c = ramp_coefficient(i, sched);
    let norm = grad.l2_norm();
    let weight = if norm < DEGENERATE_NORM { 0.0 } else { c / norm };

    let (factor, divisor) = match sched.accumulation_mode {
        AccumulationMode::Literal => (i as f64, 1.0),
        AccumulationMode::RunningAverage => ((i - 1) as f64, i as f64),
    };
    let mut values = prev.values.clone();
    let mut log_scale = prev.log_scale;
    if factor == 0.0 {
        values = Field::zeros(prev.shape());
        log_scale = 0.0;
    } else if log_scale == 0.0 {
        values.data_mut().iter_mut().for_each(|v| *v *= factor);
    } else {
        log_scale += factor.ln();
    }
    // Stored values are e^{-log_scale} times the state, so the new term is too.
    let g_coeff = weight * (-log_scale).exp();
    for (v, &g) in values.data_mut().iter_mut().zip(grad.data()) {
        *v += g_coeff * g;
    }
    if divisor != 1.0 {
        if log_scale == 0.0 {
            values.data_mut().iter_mut().for_each(|v| *v /= divisor);
        } else {
            log_scale -= divisor.ln();
        }
    }
    let stored = values.l2_norm();
    if stored > RESCALE_ABOVE {
        values = values.scale(1.0 / stored);
        log_scale += stored.ln();
    }
    Ok(CumulativeGradient { values, log_scale, iteration: i })
}

/// Unit-norm learning-rate map.
#[derive(Clone, Debug, PartialEq)]
pub struct LrMap {
    values: Field,
    degenerate: bool,
}

impl LrMap {
    /// Every element `1/√n`.
    pub fn uniform(shape: Shape) -> Self {
        let v = 1.0 / (shape.len() as f64).sqrt();
        LrMap { values: Field::filled(shape, v), degenerate: false }
    }

    pub fn values(&self) -> &Field {
        &self.values
    }

    pub fn into_field(self) -> Field {
        self.values
    }

    /// Set when the source state had (near-)zero norm.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// The element-wise rate the ascent step multiplies in.
    pub fn rates(&self, mode: LrSignMode) -> Field {
        match mode {
            LrSignMode::Signed => self.values.clone(),
            LrSignMode::Magnitude => self.values.map(f64::abs),
        }
    }
}

pub fn normalize_lr_map(cum: &CumulativeGradient) -> LrMap {
    let v = cum.direction();
    let norm = v.l2_norm();
    if norm == 0.0 || norm.ln() + cum.log_scale() < DEGENERATE_NORM.ln() {
        let mut map = LrMap::uniform(v.shape());
        map.degenerate = true;
        return map;
    }
    LrMap { values: v.scale(1.0 / norm), degenerate: false }
}
