//! Layer-wise relevance propagation. Relevance is seeded with the chosen
//! class logit, redistributed through conv/affine connections by the
//! gamma rule (or its z+ limit), routed through ReLU and pooling along
//! the forward-selected paths, and any share assigned to a bias is kept
//! as a per-layer sink instead of being redistributed.

use crate::error::{Error, Result};
use crate::grad::GradientBundle;
use crate::layer::{conv_dims, pool_window_max, LayerSpec};
use crate::model::{ForwardTrace, Model};
use crate::tensor::Tensor;

/// Denominator stabilizer; added with the denominator's sign so the
/// contribution signs never flip. sign(0) counts as positive.
const EPSILON: f64 = 1e-9;

/// Relevance redistribution rule for parametric layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelevanceRule {
    /// z_jk = a_j (w_jk + gamma * max(w_jk, 0)); gamma = 0 is plain LRP-0.
    LrpGamma { gamma: f64 },
    /// The gamma -> infinity limit: z_jk = a_j * max(w_jk, 0).
    LrpZPlus,
}

impl RelevanceRule {
    fn validate(&self) -> Result<()> {
        if let RelevanceRule::LrpGamma { gamma } = self {
            if !(*gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "gamma must be a finite nonnegative real, got {gamma}"
                )));
            }
        }
        Ok(())
    }

    fn weight_coef(&self, w: f64) -> f64 {
        match self {
            RelevanceRule::LrpGamma { gamma } => w + gamma * w.max(0.0),
            RelevanceRule::LrpZPlus => w.max(0.0),
        }
    }

    fn bias_term(&self, b: f64) -> f64 {
        match self {
            RelevanceRule::LrpGamma { gamma } => {
                if b > 0.0 {
                    b * (1.0 + gamma)
                } else {
                    b
                }
            }
            RelevanceRule::LrpZPlus => b.max(0.0),
        }
    }
}

fn stabilize(z: f64) -> f64 {
    if z >= 0.0 {
        z + EPSILON
    } else {
        z - EPSILON
    }
}

/// Runs the relevance pass for one class. The returned bundle's per-layer
/// "bias" tensors hold the relevance absorbed by each layer's bias.
pub fn lrp(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    rule: RelevanceRule,
) -> Result<GradientBundle> {
    rule.validate()?;
    if class_index >= model.class_count() {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range for {} classes",
            model.class_count()
        )));
    }
    if trace.len() != model.layers().len() {
        return Err(Error::shape(
            "lrp",
            format!(
                "trace has {} layers, model has {}",
                trace.len(),
                model.layers().len()
            ),
        ));
    }

    let logits = trace.logits();
    let mut seed = vec![0.0; logits.len()];
    seed[class_index] = logits.data()[class_index];
    let mut relevance = Tensor::from_parts(vec![logits.len()], seed);

    let layer_count = model.layers().len();
    let mut layer_rel = vec![Tensor::zeros(vec![1]); layer_count];
    let mut bias_rel: Vec<Option<Tensor>> = vec![None; layer_count];

    for l in (0..layer_count).rev() {
        layer_rel[l] = relevance.clone();
        let input = trace.layer_input(l);
        relevance = match &model.layers()[l] {
            LayerSpec::Conv2d { weights, bias, stride, padding } => {
                let (rin, rbias) =
                    conv_relevance(input, weights, bias, *stride, *padding, &relevance, rule);
                bias_rel[l] = Some(rbias);
                rin
            }
            LayerSpec::Affine { weights, bias } => {
                let (rin, rbias) = affine_relevance(input, weights, bias, &relevance, rule);
                bias_rel[l] = Some(rbias);
                rin
            }
            LayerSpec::Relu => {
                // Forward-selected paths: active units pass, dead units drop.
                let mask = input.data();
                let data = relevance
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&r, &pre)| if pre > 0.0 { r } else { 0.0 })
                    .collect();
                Tensor::from_parts(input.shape().to_vec(), data)
            }
            LayerSpec::MaxPool { kernel, stride } => {
                maxpool_relevance(input, relevance.shape(), &relevance, *kernel, *stride)
            }
            LayerSpec::Flatten => relevance.reshaped(input.shape().to_vec())?,
        };
    }

    Ok(GradientBundle::from_relevance(layer_rel, bias_rel, relevance))
}

fn affine_relevance(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    r_out: &Tensor,
    rule: RelevanceRule,
) -> (Tensor, Tensor) {
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    let a = input.data();
    let wgt = weights.data();
    let mut r_in = vec![0.0; inp];
    let mut r_bias = vec![0.0; out];
    for k in 0..out {
        let rk = r_out.data()[k];
        let row = &wgt[k * inp..(k + 1) * inp];
        let bias_term = rule.bias_term(bias.data()[k]);
        let mut z = bias_term;
        for (av, wv) in a.iter().zip(row) {
            z += av * rule.weight_coef(*wv);
        }
        if rk == 0.0 {
            continue;
        }
        let denom = stabilize(z);
        let scale = rk / denom;
        for j in 0..inp {
            r_in[j] += a[j] * rule.weight_coef(row[j]) * scale;
        }
        r_bias[k] = bias_term * scale;
    }
    (
        Tensor::from_parts(vec![inp], r_in),
        Tensor::from_parts(vec![out], r_bias),
    )
}

fn conv_relevance(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    r_out: &Tensor,
    rule: RelevanceRule,
) -> (Tensor, Tensor) {
    let (out_ch, in_ch, kh, kw) = conv_dims(weights);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (r_out.shape()[1], r_out.shape()[2]);
    let a = input.data();
    let wgt = weights.data();
    let r = r_out.data();
    let mut r_in = vec![0.0; input.len()];
    let mut r_bias = vec![0.0; out_ch];
    for co in 0..out_ch {
        let w_co = &wgt[co * in_ch * kh * kw..(co + 1) * in_ch * kh * kw];
        let bias_term = rule.bias_term(bias.data()[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let rk = r[(co * oh + oy) * ow + ox];
                if rk == 0.0 {
                    continue;
                }
                // First pass: the target unit's stabilized denominator.
                let mut z = bias_term;
                for ci in 0..in_ch {
                    let w_ci = &w_co[ci * kh * kw..(ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let row = (ci * h + iy as usize) * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            z += a[row + ix as usize] * rule.weight_coef(w_ci[ky * kw + kx]);
                        }
                    }
                }
                let scale = rk / stabilize(z);
                // Second pass: distribute.
                for ci in 0..in_ch {
                    let w_ci = &w_co[ci * kh * kw..(ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let row = (ci * h + iy as usize) * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = row + ix as usize;
                            r_in[idx] += a[idx] * rule.weight_coef(w_ci[ky * kw + kx]) * scale;
                        }
                    }
                }
                r_bias[co] += bias_term * scale;
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), r_in),
        Tensor::from_parts(vec![out_ch], r_bias),
    )
}

fn maxpool_relevance(
    input: &Tensor,
    out_shape: &[usize],
    r_out: &Tensor,
    kernel: usize,
    stride: usize,
) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let r = r_out.data();
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, winner) = pool_window_max(x, ch, h, w, oy * stride, ox * stride, kernel);
                out[winner] += r[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerSpec;
    use crate::model::{build_minivgg, forward, Model};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_affine(w: Vec<f64>, cols: usize, b: Vec<f64>) -> Model {
        let rows = w.len() / cols;
        let head = LayerSpec::affine(
            Tensor::new(vec![rows, cols], w).unwrap(),
            Tensor::new(vec![rows], b).unwrap(),
        )
        .unwrap();
        Model::new(vec![head], vec![], rows, &[cols]).unwrap()
    }

    #[test]
    fn lrp0_hand_example_conserves() {
        // a = [1, 2], w = [1, -1], b = 0: f = -1, z = [1, -2].
        let model = single_affine(vec![1.0, -1.0], 2, vec![0.0]);
        let trace = forward(&model, &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(trace.logits().data(), &[-1.0]);
        let bundle = lrp(&model, &trace, 0, RelevanceRule::LrpGamma { gamma: 0.0 }).unwrap();
        let r = bundle.input_grad().data();
        assert!((r[0] - 1.0).abs() < 1e-6, "{r:?}");
        assert!((r[1] + 2.0).abs() < 1e-6, "{r:?}");
        let total = r[0] + r[1] + bundle.bias_grad(0).unwrap().sum();
        assert!((total - -1.0).abs() < 1e-6);
    }

    #[test]
    fn zplus_hand_example() {
        // Same layer; w+ = [1, 0], so all relevance flows to the first unit.
        // Forcing the seed to 2 means scaling the logit path: use weights
        // that produce logit 2 with positive contributions only.
        let model = single_affine(vec![2.0, -1.0], 2, vec![0.0]);
        let trace = forward(&model, &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(trace.logits().data(), &[0.0]);
        // Logit is 0 here, so craft the check through a direct call with
        // weights [1, -1] and input scaled to give R_k = 2.
        let model2 = single_affine(vec![1.0, -1.0], 2, vec![0.0]);
        let input = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (r_in, r_bias) = affine_relevance(
            &input,
            match &model2.layers()[0] {
                LayerSpec::Affine { weights, .. } => weights,
                _ => unreachable!(),
            },
            &Tensor::zeros(vec![1]),
            &Tensor::new(vec![1], vec![2.0]).unwrap(),
            RelevanceRule::LrpZPlus,
        );
        assert!((r_in.data()[0] - 2.0).abs() < 1e-6, "{:?}", r_in.data());
        assert!(r_in.data()[1].abs() < 1e-6);
        assert!(r_bias.data()[0].abs() < 1e-6);
    }

    #[test]
    fn gamma_limit_matches_zplus_on_positive_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..0.5)).collect();
        let model = single_affine(w, 3, b);
        let input = Tensor::new(vec![3], vec![0.5, 1.5, 0.25]).unwrap();
        let trace = forward(&model, &input).unwrap();
        let big = lrp(&model, &trace, 0, RelevanceRule::LrpGamma { gamma: 1e6 }).unwrap();
        let zp = lrp(&model, &trace, 0, RelevanceRule::LrpZPlus).unwrap();
        for (a, b) in big.input_grad().data().iter().zip(zp.input_grad().data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    fn random_image(extent: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_parts(
            vec![1, extent, extent],
            (0..extent * extent).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn lrp0_conservation_per_layer_and_end_to_end() {
        for seed in 0..3u64 {
            let model = build_minivgg(&[4, 8], 16, 1, 4, seed).unwrap();
            let image = random_image(16, seed + 50);
            let trace = forward(&model, &image).unwrap();
            let class = crate::model::argmax_index(trace.logits().data());
            let seeded = trace.logits().data()[class];
            let bundle = lrp(&model, &trace, class, RelevanceRule::LrpGamma { gamma: 0.0 }).unwrap();

            let scale = seeded.abs().max(1e-12);
            // Per layer: relevance into the layer equals relevance out of it
            // plus whatever its bias absorbed.
            for l in 0..model.layers().len() {
                let out_sum = bundle.layer_grad(l).sum();
                let in_sum = bundle.layer_input_grad(l).sum();
                let bias_sum = bundle.bias_grad(l).map(|t| t.sum()).unwrap_or(0.0);
                assert!(
                    (out_sum - in_sum - bias_sum).abs() <= 1e-6 * scale,
                    "layer {l}: {out_sum} vs {in_sum} + {bias_sum}"
                );
            }
            let mut total = bundle.input_grad().sum();
            for l in 0..model.layers().len() {
                total += bundle.bias_grad(l).map(|t| t.sum()).unwrap_or(0.0);
            }
            assert!(
                (total - seeded).abs() <= 1e-6 * scale,
                "end-to-end {total} vs {seeded}"
            );
        }
    }

    #[test]
    fn zplus_is_nonnegative_for_nonnegative_seeds() {
        for seed in 0..3u64 {
            let model = build_minivgg(&[4, 8], 16, 1, 4, seed).unwrap();
            let image = random_image(16, seed);
            let trace = forward(&model, &image).unwrap();
            let class = crate::model::argmax_index(trace.logits().data());
            if trace.logits().data()[class] < 0.0 {
                continue;
            }
            let bundle = lrp(&model, &trace, class, RelevanceRule::LrpZPlus).unwrap();
            assert!(bundle.input_grad().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let model = single_affine(vec![1.0], 1, vec![0.0]);
        let trace = forward(&model, &Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        assert!(lrp(&model, &trace, 0, RelevanceRule::LrpGamma { gamma: -1.0 }).is_err());
    }
}
