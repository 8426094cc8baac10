use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Classifier;
use crate::error::{Error, Result};
use crate::image_core::Field;

/// Magnitude below which gradients count as zero when forming a relative
/// error: `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Element index (row-major `y, x, c`) of the worst error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Elements whose `±epsilon` probe crossed a ReLU or pooling switch.
    pub excluded: usize,
}

/// Compares the analytic input gradient of `class` with central differences
/// on a seeded random subsample of `samples` elements (all elements if the
/// input is smaller).
///
/// Elements whose perturbation changes the classifier's activation pattern
/// (ReLU sign or pooling argmax) sit on a non-differentiable kink and are
/// excluded rather than compared.
pub fn gradient_check<C: Classifier + ?Sized>(
    model: &C,
    input: &Field,
    class: usize,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (_, analytic) = model.gradient_field(input, class)?;
    let n = input.data().len();
    let mut indices: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, samples).into_vec()
    };
    indices.sort_unstable();

    let base_pattern = model.activation_pattern(input);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: 0, excluded: 0 };
    let mut probe = input.clone();
    for &i in &indices {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + epsilon;
        let plus_pattern = model.activation_pattern(&probe);
        let plus = model.logits_field(&probe)?.get(class);
        probe.data_mut()[i] = original - epsilon;
        let minus_pattern = model.activation_pattern(&probe);
        let minus = model.logits_field(&probe)?.get(class);
        probe.data_mut()[i] = original;

        if base_pattern.is_some() && (plus_pattern != base_pattern || minus_pattern != base_pattern) {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
