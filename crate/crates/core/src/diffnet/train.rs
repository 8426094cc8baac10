use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, LayerParams, NetworkWeights};
use crate::error::{Error, Result};
use crate::idx::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 1, batch_size: 32, step_size: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub weights: NetworkWeights,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

/// Mini-batch SGD on softmax cross-entropy.
///
/// Initialization and shuffling draw from one ChaCha stream seeded by
/// `params.seed`, and samples are accumulated in a fixed order, so a given
/// seed reproduces the weights bit for bit.
pub fn train_classifier(
    arch: Architecture,
    train: &Dataset,
    test: Option<&Dataset>,
    params: &TrainParams,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if params.batch_size == 0 || !(params.step_size >= 0.0) {
        return Err(Error::InvalidArgument("batch_size must be >= 1 and step_size >= 0".into()));
    }
    let shape = train.shape().expect("non-empty");
    if shape != arch.input {
        return Err(Error::shape(arch.input, shape));
    }
    let mut net = NetworkWeights::init(arch, params.seed)?;
    if train.num_classes != net.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, network outputs {}",
            train.num_classes, net.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads: Vec<LayerParams> = zeroed_like(net.params());
    let mut epoch_losses = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(params.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| {
                g.weights.iter_mut().for_each(|v| *v = 0.0);
                g.bias.iter_mut().for_each(|v| *v = 0.0);
            });
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += net.accumulate_sample(&train.images[i], train.labels[i], &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: batch_loss / batch.len() as f64 });
            }
            epoch_loss += batch_loss;
            let scale = params.step_size / batch.len() as f64;
            for (p, g) in net.params_mut().iter_mut().zip(&grads) {
                for (w, d) in p.weights.iter_mut().zip(&g.weights) {
                    *w -= scale * d;
                }
                for (w, d) in p.bias.iter_mut().zip(&g.bias) {
                    *w -= scale * d;
                }
            }
        }
        let mean = epoch_loss / train.len() as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }

    let test_accuracy = test.map(|t| evaluate(&net, t));
    Ok(TrainReport { weights: net, epoch_losses, test_accuracy })
}

fn zeroed_like(params: &[LayerParams]) -> Vec<LayerParams> {
    params
        .iter()
        .map(|p| LayerParams { weights: vec![0.0; p.weights.len()], bias: vec![0.0; p.bias.len()] })
        .collect()
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(net: &NetworkWeights, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data.images.iter().zip(&data.labels).filter(|(img, &l)| net.predict(img) == l).count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_core::{ImageTensor, Shape};
    use rand::Rng;

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        // Two classes: bright top half vs bright bottom half, plus noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(8, 8, 1);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let data = (0..64)
                .map(|k| {
                    let top = k < 32;
                    let base = if (label == 0) == top { 200.0 } else { 30.0 };
                    base + 40.0 * (rng.random::<f64>() - 0.5)
                })
                .collect();
            images.push(ImageTensor::from_vec(shape, data).unwrap());
            labels.push(label);
        }
        Dataset::new(images, labels, 2).unwrap()
    }

    fn toy_arch() -> Architecture {
        Architecture::default_for(Shape::new(8, 8, 1), 2)
    }

    #[test]
    fn zero_step_leaves_initial_weights() {
        let data = toy_dataset(10, 1);
        let params = TrainParams { epochs: 1, batch_size: 4, step_size: 0.0, seed: 11 };
        let report = train_classifier(toy_arch(), &data, None, &params, |_, _| {}).unwrap();
        assert_eq!(report.weights, NetworkWeights::init(toy_arch(), 11).unwrap());
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let data = toy_dataset(40, 2);
        let params = TrainParams { epochs: 2, batch_size: 8, step_size: 0.05, seed: 3 };
        let a = train_classifier(toy_arch(), &data, None, &params, |_, _| {}).unwrap();
        let b = train_classifier(toy_arch(), &data, None, &params, |_, _| {}).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let data = toy_dataset(200, 3);
        let test = toy_dataset(100, 4);
        let params = TrainParams { epochs: 3, batch_size: 10, step_size: 0.05, seed: 5 };
        let report = train_classifier(toy_arch(), &data, Some(&test), &params, |_, _| {}).unwrap();
        assert!(report.epoch_losses[1] < report.epoch_losses[0]);
        assert!(report.test_accuracy.unwrap() > 0.95);
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_dataset(20, 6);
        let params = TrainParams { epochs: 5, batch_size: 2, step_size: 1e200, seed: 5 };
        let r = train_classifier(toy_arch(), &data, None, &params, |_, _| {});
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }
}
