//! Deliberately minimal trainer: plain SGD on softmax cross-entropy,
//! single-threaded, driven by the standard-rule reverse pass. Its job is
//! to produce a class-sensitive desk-scale model, not to be fast or
//! fancy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::backward_with_weights;
use crate::layer::LayerSpec;
use crate::model::{argmax_index, forward, Model};
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_BATCH: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch: DEFAULT_BATCH,
            seed: 0,
        }
    }
}

/// Numerically stable log-softmax pieces: (log sum exp, probabilities).
fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let log_sum = m + sum.ln();
    let probs = logits.iter().map(|l| (l - log_sum).exp()).collect();
    (log_sum, probs)
}

/// Mean cross-entropy of the model over labelled pairs.
pub fn mean_loss(model: &Model, data: &[(Tensor, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (image, label) in data {
        let trace = forward(model, image)?;
        let (log_sum, _) = softmax(trace.logits().data());
        total += log_sum - trace.logits().data()[*label];
    }
    Ok(total / data.len() as f64)
}

/// Fraction of pairs whose argmax logit matches the label.
pub fn accuracy(model: &Model, data: &[(Tensor, usize)]) -> Result<f64> {
    let mut hits = 0;
    for (image, label) in data {
        let trace = forward(model, image)?;
        if argmax_index(trace.logits().data()) == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

struct ParamGrads {
    weights: Vec<Option<Tensor>>,
    biases: Vec<Option<Tensor>>,
}

/// Plain SGD on softmax cross-entropy. Returns a new model; the input is
/// never mutated. Aborts with a diagnostic if the loss stops being
/// finite.
pub fn train_toy(
    model: &Model,
    data: &[(Tensor, usize)],
    options: &TrainOptions,
) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (i, (_, label)) in data.iter().enumerate() {
        if *label >= model.class_count() {
            return Err(Error::InvalidArgument(format!(
                "label {label} of sample {i} out of range for {} classes",
                model.class_count()
            )));
        }
    }
    if options.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }

    let mut trained = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(options.batch) {
            let mut grads = ParamGrads {
                weights: vec![None; trained.layers().len()],
                biases: vec![None; trained.layers().len()],
            };
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (image, label) = &data[i];
                let trace = forward(&trained, image)?;
                let logits = trace.logits().data();
                let (log_sum, probs) = softmax(logits);
                batch_loss += (log_sum - logits[*label]) * scale;
                // d loss / d logit = (p - onehot) / batch.
                let seed: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, p)| (p - if c == *label { 1.0 } else { 0.0 }) * scale)
                    .collect();
                let seed = Tensor::from_parts(vec![probs.len()], seed);
                let bundle = backward_with_weights(&trained, &trace, &seed)?;
                for l in 0..trained.layers().len() {
                    if let Some(wg) = bundle.weight_grad(l) {
                        accumulate(&mut grads.weights[l], wg);
                    }
                    if let Some(bg) = bundle.bias_grad(l) {
                        accumulate(&mut grads.biases[l], bg);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}; reduce the learning rate"
                )));
            }
            apply_sgd_step(&mut trained, &grads, options.learning_rate)?;
        }
    }
    Ok(trained)
}

fn accumulate(slot: &mut Option<Tensor>, grad: &Tensor) {
    match slot {
        Some(acc) => {
            let acc_data = acc.data_mut();
            for (a, g) in acc_data.iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
        None => *slot = Some(grad.clone()),
    }
}

fn apply_sgd_step(model: &mut Model, grads: &ParamGrads, lr: f64) -> Result<()> {
    for (l, layer) in model.layers_mut().iter_mut().enumerate() {
        let (Some(wg), Some(bg)) = (&grads.weights[l], &grads.biases[l]) else {
            continue;
        };
        match layer {
            LayerSpec::Conv2d { weights, bias, .. } | LayerSpec::Affine { weights, bias } => {
                step_tensor(weights, wg, lr)?;
                step_tensor(bias, bg, lr)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// One SGD step, keeping parameters f32-representable so the weights
/// file round-trips exactly.
fn step_tensor(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    let data = param.data_mut();
    for (p, g) in data.iter_mut().zip(grad.data()) {
        let next = *p - lr * g;
        if !next.is_finite() {
            return Err(Error::Training("non-finite parameter update".into()));
        }
        *p = next as f32 as f64;
    }
    Ok(())
}
