//! Reverse-mode pass over a cached forward trace. Conv, affine, pool and
//! flatten layers always use exact adjoints; what happens at each ReLU is
//! pluggable, which is where the guided/rectified propagation rules live.

use crate::error::{Error, Result};
use crate::layer::{conv_dims, pool_window_max, LayerSpec};
use crate::model::{ForwardTrace, Model};
use crate::tensor::Tensor;

/// How the backward signal is transformed at ReLU layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReluBackwardRule {
    /// Exact adjoint: pass where the unit was active.
    Standard,
    /// Pass only positive signal through active units: I(a*R > 0) R.
    Guided,
    /// Keep entries whose product a*R clears the q-th percentile of the
    /// layer's products: I(a*R > tau) R.
    RectGrad { q: f64 },
    /// Magnitude variant: I(|a*R| > tau) R with tau from the percentile
    /// of |a*R|, so large negative signal flows too.
    RectGradMod { q: f64 },
}

impl ReluBackwardRule {
    fn validate(&self) -> Result<()> {
        match self {
            ReluBackwardRule::RectGrad { q } | ReluBackwardRule::RectGradMod { q } => {
                if !(*q > 0.0 && *q < 100.0) {
                    return Err(Error::InvalidArgument(format!(
                        "percentile q must lie strictly inside (0, 100), got {q}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Internal rule selector; the public enum plus the guided counterpart,
/// which masks on activation sign alone and must reproduce Standard.
#[derive(Debug, Clone, Copy)]
enum EngineRule {
    Spec(ReluBackwardRule),
    GuidedCounterpart,
}

/// Per-layer backward tensors from one reverse pass: the signal with
/// respect to every layer output, per-layer bias slots, and the signal
/// reaching the input. The same container carries gradients (`backward`)
/// or relevances (`lrp`); for relevance passes the bias slot is the sink
/// relevance absorbed by each layer's bias.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    layer_grads: Vec<Tensor>,
    bias_grads: Vec<Option<Tensor>>,
    weight_grads: Vec<Option<Tensor>>,
    input_grad: Tensor,
}

impl GradientBundle {
    pub(crate) fn from_relevance(
        layer_grads: Vec<Tensor>,
        bias_grads: Vec<Option<Tensor>>,
        input_grad: Tensor,
    ) -> Self {
        let weight_grads = vec![None; layer_grads.len()];
        GradientBundle { layer_grads, bias_grads, weight_grads, input_grad }
    }

    /// Signal with respect to layer `l`'s output (its post-activation).
    pub fn layer_grad(&self, layer: usize) -> &Tensor {
        &self.layer_grads[layer]
    }

    /// Signal with respect to layer `l`'s input; for a conv followed by a
    /// ReLU this is where the pre-activation gradient of the ReLU lives.
    pub fn layer_input_grad(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            &self.input_grad
        } else {
            &self.layer_grads[layer - 1]
        }
    }

    pub fn bias_grad(&self, layer: usize) -> Option<&Tensor> {
        self.bias_grads[layer].as_ref()
    }

    pub fn weight_grad(&self, layer: usize) -> Option<&Tensor> {
        self.weight_grads[layer].as_ref()
    }

    pub fn input_grad(&self) -> &Tensor {
        &self.input_grad
    }

    pub fn layer_count(&self) -> usize {
        self.layer_grads.len()
    }

    /// Exact bit-level equality of every tensor in the bundle.
    pub fn bits_eq(&self, other: &GradientBundle) -> bool {
        if self.layer_grads.len() != other.layer_grads.len() {
            return false;
        }
        let tensors = |a: &Option<Tensor>, b: &Option<Tensor>| match (a, b) {
            (Some(x), Some(y)) => x.bits_eq(y),
            (None, None) => true,
            _ => false,
        };
        self.input_grad.bits_eq(&other.input_grad)
            && self
                .layer_grads
                .iter()
                .zip(&other.layer_grads)
                .all(|(a, b)| a.bits_eq(b))
            && self
                .bias_grads
                .iter()
                .zip(&other.bias_grads)
                .all(|(a, b)| tensors(a, b))
            && self
                .weight_grads
                .iter()
                .zip(&other.weight_grads)
                .all(|(a, b)| tensors(a, b))
    }
}

fn check_trace(model: &Model, trace: &ForwardTrace) -> Result<()> {
    if trace.len() != model.layers().len() {
        return Err(Error::shape(
            "backward",
            format!(
                "trace has {} layers, model has {}",
                trace.len(),
                model.layers().len()
            ),
        ));
    }
    Ok(())
}

fn one_hot_seed(model: &Model, trace: &ForwardTrace, class_index: usize) -> Result<Tensor> {
    if class_index >= model.class_count() {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} out of range for {} classes",
            model.class_count()
        )));
    }
    let logits = trace.logits();
    let mut seed = vec![0.0; logits.len()];
    seed[class_index] = 1.0;
    Ok(Tensor::from_parts(vec![logits.len()], seed))
}

/// Backpropagates a one-hot seed on the chosen (pre-softmax) logit.
pub fn backward(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    rule: ReluBackwardRule,
) -> Result<GradientBundle> {
    rule.validate()?;
    let seed = one_hot_seed(model, trace, class_index)?;
    run_backward(model, trace, &seed, EngineRule::Spec(rule), false)
}

/// Backpropagates an arbitrary seed on the logits (used by the trainer,
/// and by linearity tests).
pub fn backward_from(
    model: &Model,
    trace: &ForwardTrace,
    seed: &Tensor,
    rule: ReluBackwardRule,
) -> Result<GradientBundle> {
    rule.validate()?;
    run_backward(model, trace, seed, EngineRule::Spec(rule), false)
}

/// Same as `backward_from` but also fills per-layer weight gradients.
pub(crate) fn backward_with_weights(
    model: &Model,
    trace: &ForwardTrace,
    seed: &Tensor,
) -> Result<GradientBundle> {
    run_backward(
        model,
        trace,
        seed,
        EngineRule::Spec(ReluBackwardRule::Standard),
        true,
    )
}

/// The guided counterpart masks ReLU signal on activation sign alone,
/// I(a > 0) R, so positive and negative signal both flow; it must agree
/// with `backward(..., Standard)` bit for bit.
pub fn guided_counterpart(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
) -> Result<GradientBundle> {
    let seed = one_hot_seed(model, trace, class_index)?;
    run_backward(model, trace, &seed, EngineRule::GuidedCounterpart, false)
}

fn run_backward(
    model: &Model,
    trace: &ForwardTrace,
    seed: &Tensor,
    rule: EngineRule,
    want_weights: bool,
) -> Result<GradientBundle> {
    check_trace(model, trace)?;
    if seed.shape() != trace.logits().shape() {
        return Err(Error::shape(
            "backward",
            format!(
                "seed shape {:?} does not match logits {:?}",
                seed.shape(),
                trace.logits().shape()
            ),
        ));
    }
    let layer_count = model.layers().len();
    let mut layer_grads = vec![Tensor::zeros(vec![1]); layer_count];
    let mut bias_grads: Vec<Option<Tensor>> = vec![None; layer_count];
    let mut weight_grads: Vec<Option<Tensor>> = vec![None; layer_count];

    let mut signal = seed.clone();
    for l in (0..layer_count).rev() {
        layer_grads[l] = signal.clone();
        let input = trace.layer_input(l);
        let output = trace.layer_output(l);
        signal = match &model.layers()[l] {
            LayerSpec::Conv2d { weights, bias, stride, padding } => {
                bias_grads[l] = Some(conv_bias_grad(&signal, bias.len()));
                if want_weights {
                    weight_grads[l] =
                        Some(conv_weight_grad(input, weights, &signal, *stride, *padding));
                }
                conv_input_grad(input, weights, &signal, *stride, *padding)
            }
            LayerSpec::Relu => apply_relu_rule(rule, output, &signal),
            LayerSpec::MaxPool { kernel, stride } => {
                maxpool_backward(input, output.shape(), &signal, *kernel, *stride)
            }
            LayerSpec::Flatten => signal.reshaped(input.shape().to_vec())?,
            LayerSpec::Affine { weights, bias } => {
                bias_grads[l] = Some(signal.clone());
                debug_assert_eq!(bias.len(), signal.len());
                if want_weights {
                    weight_grads[l] = Some(affine_weight_grad(input, weights, &signal));
                }
                affine_input_grad(weights, &signal)
            }
        };
    }
    Ok(GradientBundle {
        layer_grads,
        bias_grads,
        weight_grads,
        input_grad: signal,
    })
}

fn apply_relu_rule(rule: EngineRule, post: &Tensor, incoming: &Tensor) -> Tensor {
    let a = post.data();
    let r = incoming.data();
    let out: Vec<f64> = match rule {
        EngineRule::Spec(ReluBackwardRule::Standard) => a
            .iter()
            .zip(r)
            .map(|(&av, &rv)| if av > 0.0 { rv } else { 0.0 })
            .collect(),
        EngineRule::GuidedCounterpart => a
            .iter()
            .zip(r)
            .map(|(&av, &rv)| if av > 0.0 { rv } else { 0.0 })
            .collect(),
        EngineRule::Spec(ReluBackwardRule::Guided) => a
            .iter()
            .zip(r)
            .map(|(&av, &rv)| if av * rv > 0.0 { rv } else { 0.0 })
            .collect(),
        EngineRule::Spec(ReluBackwardRule::RectGrad { q }) => {
            let products: Vec<f64> = a.iter().zip(r).map(|(&av, &rv)| av * rv).collect();
            let tau = nearest_rank_percentile(&products, q);
            products
                .iter()
                .zip(r)
                .map(|(&p, &rv)| if p > tau { rv } else { 0.0 })
                .collect()
        }
        EngineRule::Spec(ReluBackwardRule::RectGradMod { q }) => {
            let products: Vec<f64> =
                a.iter().zip(r).map(|(&av, &rv)| (av * rv).abs()).collect();
            let tau = nearest_rank_percentile(&products, q);
            products
                .iter()
                .zip(r)
                .map(|(&p, &rv)| if p > tau { rv } else { 0.0 })
                .collect()
        }
    };
    Tensor::from_parts(post.shape().to_vec(), out)
}

/// Nearest-rank percentile: the ceil(q/100 * n)-th smallest value.
pub(crate) fn nearest_rank_percentile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn conv_bias_grad(d_out: &Tensor, out_ch: usize) -> Tensor {
    let (oh, ow) = (d_out.shape()[1], d_out.shape()[2]);
    let d = d_out.data();
    let mut g = vec![0.0; out_ch];
    for co in 0..out_ch {
        g[co] = d[co * oh * ow..(co + 1) * oh * ow].iter().sum();
    }
    Tensor::from_parts(vec![out_ch], g)
}

fn conv_input_grad(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (out_ch, in_ch, kh, kw) = conv_dims(weights);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (d_out.shape()[1], d_out.shape()[2]);
    let wgt = weights.data();
    let d = d_out.data();
    let mut g = vec![0.0; in_ch * h * w];
    for co in 0..out_ch {
        let out_base = co * oh * ow;
        for ci in 0..in_ch {
            let in_base = ci * h * w;
            let w_base = (co * in_ch + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wgt[w_base + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let row_g = in_base + iy as usize * w;
                        let row_d = out_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            g[row_g + ix as usize] += wv * d[row_d + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), g)
}

fn conv_weight_grad(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (out_ch, in_ch, kh, kw) = conv_dims(weights);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (d_out.shape()[1], d_out.shape()[2]);
    let x = input.data();
    let d = d_out.data();
    let mut g = vec![0.0; weights.len()];
    for co in 0..out_ch {
        let out_base = co * oh * ow;
        for ci in 0..in_ch {
            let in_base = ci * h * w;
            let w_base = (co * in_ch + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let row_x = in_base + iy as usize * w;
                        let row_d = out_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc += x[row_x + ix as usize] * d[row_d + ox];
                        }
                    }
                    g[w_base + ky * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::from_parts(weights.shape().to_vec(), g)
}

fn maxpool_backward(
    input: &Tensor,
    out_shape: &[usize],
    d_out: &Tensor,
    kernel: usize,
    stride: usize,
) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let d = d_out.data();
    let mut g = vec![0.0; input.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, winner) = pool_window_max(x, ch, h, w, oy * stride, ox * stride, kernel);
                g[winner] += d[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_parts(input.shape().to_vec(), g)
}

fn affine_input_grad(weights: &Tensor, d_out: &Tensor) -> Tensor {
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    let wgt = weights.data();
    let d = d_out.data();
    let mut g = vec![0.0; inp];
    for o in 0..out {
        let dv = d[o];
        if dv == 0.0 {
            continue;
        }
        let row = &wgt[o * inp..(o + 1) * inp];
        for (gv, wv) in g.iter_mut().zip(row) {
            *gv += wv * dv;
        }
    }
    Tensor::from_parts(vec![inp], g)
}

fn affine_weight_grad(input: &Tensor, weights: &Tensor, d_out: &Tensor) -> Tensor {
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    let x = input.data();
    let d = d_out.data();
    let mut g = vec![0.0; weights.len()];
    for o in 0..out {
        let dv = d[o];
        if dv == 0.0 {
            continue;
        }
        let row = &mut g[o * inp..(o + 1) * inp];
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv = xv * dv;
        }
    }
    Tensor::from_parts(weights.shape().to_vec(), g)
}

/// Reference to a layer with spatial activations: a block label or a raw
/// layer index.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerRef {
    Block(String),
    Index(usize),
}

pub(crate) fn resolve_activation_index(model: &Model, layer_ref: &LayerRef) -> Result<usize> {
    let idx = match layer_ref {
        LayerRef::Block(label) => model.block_activation_index(label)?,
        LayerRef::Index(i) => {
            if *i >= model.layers().len() {
                return Err(Error::InvalidArgument(format!(
                    "layer index {i} out of range"
                )));
            }
            *i
        }
    };
    Ok(idx)
}

/// Standard-rule gradient of the class logit with respect to the named
/// layer's activation map.
pub fn grad_wrt_layer(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer_ref: &LayerRef,
) -> Result<Tensor> {
    let idx = resolve_activation_index(model, layer_ref)?;
    if trace.layer_output(idx).ndim() != 3 {
        return Err(Error::InvalidArgument(format!(
            "layer {layer_ref:?} has no spatial activations"
        )));
    }
    let bundle = backward(model, trace, class_index, ReluBackwardRule::Standard)?;
    Ok(bundle.layer_grad(idx).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_minivgg, default_minivgg, forward};
    use proptest::prelude::*;
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
    fn standard_rule_on_single_affine_is_the_weight_row() {
        let model = single_affine(vec![3.0, -2.0], 2, vec![0.0]);
        let trace = forward(&model, &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        let bundle = backward(&model, &trace, 0, ReluBackwardRule::Standard).unwrap();
        assert_eq!(bundle.input_grad().data(), &[3.0, -2.0]);
    }

    #[test]
    fn guided_rule_blocks_negative_signal_and_dead_units() {
        // One ReLU layer: a = [1, 0], incoming R = [-2, 3].
        let post = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let incoming = Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap();
        let out = apply_relu_rule(
            EngineRule::Spec(ReluBackwardRule::Guided),
            &post,
            &incoming,
        );
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rectgrad_uses_nearest_rank_percentile() {
        let post = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let incoming = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Products are [1, 2, 3, 4]; q=50 gives tau = 2 (nearest rank).
        let out = apply_relu_rule(
            EngineRule::Spec(ReluBackwardRule::RectGrad { q: 50.0 }),
            &post,
            &incoming,
        );
        assert_eq!(out.data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn rectgrad_mod_thresholds_magnitudes() {
        let post = Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let incoming = Tensor::new(vec![4], vec![-4.0, 2.0, -1.0, 3.0]).unwrap();
        // |products| = [4, 2, 1, 3]; q=50 -> tau' = 2; keep |p| > 2.
        let out = apply_relu_rule(
            EngineRule::Spec(ReluBackwardRule::RectGradMod { q: 50.0 }),
            &post,
            &incoming,
        );
        assert_eq!(out.data(), &[-4.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn invalid_percentile_is_rejected() {
        let model = single_affine(vec![1.0], 1, vec![0.0]);
        let trace = forward(&model, &Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        for q in [0.0, 100.0, -3.0] {
            assert!(backward(&model, &trace, 0, ReluBackwardRule::RectGrad { q }).is_err());
        }
    }

    #[test]
    fn invalid_class_is_rejected() {
        let model = single_affine(vec![1.0, 2.0], 2, vec![0.0]);
        let trace = forward(&model, &Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(backward(&model, &trace, 1, ReluBackwardRule::Standard).is_err());
    }

    fn random_image(extent: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_parts(
            vec![1, extent, extent],
            (0..extent * extent).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    /// ReLU masks and pool winners must agree between the two perturbed
    /// traces, otherwise the difference quotient straddles a kink and is
    /// not a valid derivative estimate.
    fn stencil_is_smooth(model: &Model, plus: &ForwardTrace, minus: &ForwardTrace) -> bool {
        for (l, layer) in model.layers().iter().enumerate() {
            match layer {
                LayerSpec::Relu => {
                    let a = plus.layer_output(l).data();
                    let b = minus.layer_output(l).data();
                    if a.iter().zip(b).any(|(x, y)| (*x > 0.0) != (*y > 0.0)) {
                        return false;
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let ia = plus.layer_input(l);
                    let ib = minus.layer_input(l);
                    let (c, h, w) = (ia.shape()[0], ia.shape()[1], ia.shape()[2]);
                    let os = plus.layer_output(l).shape().to_vec();
                    for ch in 0..c {
                        for oy in 0..os[1] {
                            for ox in 0..os[2] {
                                let wa = pool_window_max(
                                    ia.data(), ch, h, w, oy * stride, ox * stride, *kernel,
                                )
                                .1;
                                let wb = pool_window_max(
                                    ib.data(), ch, h, w, oy * stride, ox * stride, *kernel,
                                )
                                .1;
                                if wa != wb {
                                    return false;
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        true
    }

    #[test]
    fn standard_gradients_match_central_differences() {
        let h = 1e-4;
        let model = default_minivgg(31);
        let image = random_image(32, 77);
        let trace = forward(&model, &image).unwrap();
        let bundle = backward(&model, &trace, 0, ReluBackwardRule::Standard).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 8 && attempts < 200 {
            attempts += 1;
            let i = rng.gen_range(0..image.len());
            let mut plus = image.data().to_vec();
            plus[i] += h;
            let mut minus = image.data().to_vec();
            minus[i] -= h;
            let tp = forward(&model, &Tensor::from_parts(image.shape().to_vec(), plus)).unwrap();
            let tm = forward(&model, &Tensor::from_parts(image.shape().to_vec(), minus)).unwrap();
            if !stencil_is_smooth(&model, &tp, &tm) {
                continue;
            }
            let fd = (tp.logits().data()[0] - tm.logits().data()[0]) / (2.0 * h);
            let bp = bundle.input_grad().data()[i];
            assert!(
                (bp - fd).abs() <= 1e-12 + 1e-5 * fd.abs().max(bp.abs()),
                "coordinate {i}: bp {bp} vs fd {fd}"
            );
            checked += 1;
        }
        assert_eq!(checked, 8, "too few smooth stencils found");
    }

    #[test]
    fn guided_counterpart_equals_standard_bitwise() {
        for seed in [0, 1, 2] {
            let model = build_minivgg(&[4, 8], 16, 1, 4, seed).unwrap();
            let image = random_image(16, seed + 10);
            let trace = forward(&model, &image).unwrap();
            let std = backward(&model, &trace, 1, ReluBackwardRule::Standard).unwrap();
            let cp = guided_counterpart(&model, &trace, 1).unwrap();
            assert!(std.bits_eq(&cp));
        }
    }

    #[test]
    fn guided_is_a_mask_of_standard() {
        let model = build_minivgg(&[4, 8], 16, 1, 4, 9).unwrap();
        let image = random_image(16, 4);
        let trace = forward(&model, &image).unwrap();
        let std = backward(&model, &trace, 0, ReluBackwardRule::Standard).unwrap();
        let guided = backward(&model, &trace, 0, ReluBackwardRule::Guided).unwrap();
        // Immediately below the top ReLU the guided signal is either the
        // standard signal or zero; further down the passes diverge.
        for (l, layer) in model.layers().iter().enumerate().rev() {
            if matches!(layer, LayerSpec::Relu) {
                let s = std.layer_input_grad(l);
                let g = guided.layer_input_grad(l);
                for (sv, gv) in s.data().iter().zip(g.data()) {
                    assert!(*gv == 0.0 || gv == sv);
                    if *sv == 0.0 {
                        assert_eq!(*gv, 0.0);
                    }
                }
                break;
            }
        }
    }

    #[test]
    fn rectgrad_with_tiny_q_keeps_everything_above_the_minimum() {
        let model = build_minivgg(&[4, 8], 16, 1, 4, 21).unwrap();
        let image = random_image(16, 2);
        let trace = forward(&model, &image).unwrap();
        let rect = backward(&model, &trace, 0, ReluBackwardRule::RectGrad { q: 1e-9 }).unwrap();
        // tau is the minimum product, so at the top ReLU every entry with
        // a*R above that minimum survives.
        let top_relu = model
            .layers()
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Relu))
            .unwrap();
        let a = trace.layer_output(top_relu).data();
        let r = rect.layer_grad(top_relu).data();
        let products: Vec<f64> = a.iter().zip(r).map(|(x, y)| x * y).collect();
        let tau = products.iter().cloned().fold(f64::INFINITY, f64::min);
        let out = rect.layer_input_grad(top_relu).data();
        for ((p, rv), ov) in products.iter().zip(r).zip(out) {
            if *p > tau {
                assert_eq!(ov, rv);
            } else {
                assert_eq!(*ov, 0.0);
            }
        }
    }

    #[test]
    fn grad_wrt_layer_matches_chain_rule_and_shapes() {
        let model = default_minivgg(3);
        let image = random_image(32, 3);
        let trace = forward(&model, &image).unwrap();
        let g = grad_wrt_layer(&model, &trace, 2, &LayerRef::Block("B4".into())).unwrap();
        let act_idx = model.block_activation_index("B4").unwrap();
        assert_eq!(g.shape(), trace.layer_output(act_idx).shape());
        // Non-spatial layers are rejected.
        let head = model.layers().len() - 1;
        assert!(grad_wrt_layer(&model, &trace, 2, &LayerRef::Index(head)).is_err());
    }

    #[test]
    fn two_layer_chain_rule_by_hand() {
        // conv (1x1 kernel, weight 2, bias 0) then affine [1, 3] row.
        let conv = LayerSpec::conv2d(
            Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
            Tensor::zeros(vec![1]),
            1,
            0,
        )
        .unwrap();
        let head = LayerSpec::affine(
            Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap(),
            Tensor::zeros(vec![1]),
        )
        .unwrap();
        let model = Model::new(
            vec![conv, LayerSpec::Flatten, head],
            vec![("B1".into(), 0)],
            1,
            &[1, 1, 2],
        )
        .unwrap();
        let trace = forward(&model, &Tensor::new(vec![1, 1, 2], vec![5.0, 7.0]).unwrap()).unwrap();
        let g = grad_wrt_layer(&model, &trace, 0, &LayerRef::Block("B1".into())).unwrap();
        // d f / d conv_out = head row; d f / d input = 2 * head row.
        assert_eq!(g.data(), &[1.0, 3.0]);
        let bundle = backward(&model, &trace, 0, ReluBackwardRule::Standard).unwrap();
        assert_eq!(bundle.input_grad().data(), &[2.0, 6.0]);
    }

    proptest! {
        // Both passes are linear in the seed: scaling the seed scales
        // every tensor in the bundle.
        #[test]
        fn backward_is_linear_in_the_seed(c in -4.0f64..4.0, seed in 0u64..20) {
            let model = build_minivgg(&[4, 8], 16, 1, 4, seed).unwrap();
            let image = random_image(16, seed);
            let trace = forward(&model, &image).unwrap();
            let mut base = vec![0.0; 4];
            base[1] = 1.0;
            let scaled: Vec<f64> = base.iter().map(|v| v * c).collect();
            let a = backward_from(&model, &trace, &Tensor::from_parts(vec![4], base), ReluBackwardRule::Standard).unwrap();
            let b = backward_from(&model, &trace, &Tensor::from_parts(vec![4], scaled), ReluBackwardRule::Standard).unwrap();
            for (x, y) in a.input_grad().data().iter().zip(b.input_grad().data()) {
                prop_assert!((x * c - y).abs() <= 1e-9 * (y.abs().max(1.0)));
            }
        }
    }
}
