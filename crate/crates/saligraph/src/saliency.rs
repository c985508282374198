//! Saliency map constructions: the aggregation family (GradCAM and its
//! positive variants, GradCAM++, GradMid, FullGrad, the cumulative
//! all-block sums) and the propagation family (raw gradients, guided
//! backprop, RectGrad and its magnitude variant, LRP). Every method
//! returns a 2-d map at input spatial resolution.

use crate::error::{Error, Result};
use crate::grad::{
    backward, grad_wrt_layer, resolve_activation_index, GradientBundle, LayerRef,
    ReluBackwardRule,
};
use crate::layer::LayerSpec;
use crate::lrp::{lrp, RelevanceRule};
use crate::model::{ForwardTrace, Model};
use crate::tensor::{bilinear_upsample, minmax_normalize, Tensor};

/// A saliency map with its provenance: which method produced it, at which
/// layer (when layer-bound), for which class.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub method_id: String,
    pub layer_ref: Option<String>,
    pub class_index: usize,
}

/// Where GradCAM_Pos applies its absolute value: to the pooled channel
/// weight (the default reading) or inside the spatial mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PosAbsPlacement {
    #[default]
    OnWeight,
    InsideMean,
}

/// Positive filter used by GradMid: absolute value (default) or ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PositiveFilter {
    #[default]
    Abs,
    Relu,
}

/// Configuration switches for readings the source material leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MethodOptions {
    pub gradcam_pos_abs: PosAbsPlacement,
    pub gradmid_filter: PositiveFilter,
}

/// Which cumulative aggregation to run over all blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CumulativeKind {
    GradCamPos,
    GradMid,
}

/// Which propagation method to run to the input.
#[derive(Debug, Clone, PartialEq)]
pub enum PropagationSpec {
    Gradients,
    GuidedBp,
    RectGrad { q: f64 },
    RectGradMod { q: f64 },
    Lrp { rule: RelevanceRule },
}

/// Full method inventory, used by the protocol harness and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    GradCam { layer: String },
    GradCamPos { layer: String },
    GradCamPp { layer: String },
    GradMid { layer: String },
    FullGrad,
    CumulativeGradCam,
    CumulativeGradMid,
    Gradients,
    GuidedBp,
    RectGrad { q: f64 },
    RectGradMod { q: f64 },
    Lrp { rule: RelevanceRule },
}

impl MethodSpec {
    pub fn id(&self) -> String {
        match self {
            MethodSpec::GradCam { .. } => "gradcam".into(),
            MethodSpec::GradCamPos { .. } => "gradcam_pos".into(),
            MethodSpec::GradCamPp { .. } => "gradcam_pp".into(),
            MethodSpec::GradMid { .. } => "gradmid".into(),
            MethodSpec::FullGrad => "fullgrad".into(),
            MethodSpec::CumulativeGradCam => "cumulative_gradcam".into(),
            MethodSpec::CumulativeGradMid => "cumulative_gradmid".into(),
            MethodSpec::Gradients => "gradients".into(),
            MethodSpec::GuidedBp => "guided_bp".into(),
            MethodSpec::RectGrad { .. } => "rectgrad".into(),
            MethodSpec::RectGradMod { .. } => "rectgrad_mod".into(),
            MethodSpec::Lrp { rule } => match rule {
                RelevanceRule::LrpZPlus => "lrp_zplus".into(),
                RelevanceRule::LrpGamma { gamma } if *gamma == 0.0 => "lrp_0".into(),
                RelevanceRule::LrpGamma { .. } => "lrp_gamma".into(),
            },
        }
    }

    pub fn layer(&self) -> Option<&str> {
        match self {
            MethodSpec::GradCam { layer }
            | MethodSpec::GradCamPos { layer }
            | MethodSpec::GradCamPp { layer }
            | MethodSpec::GradMid { layer } => Some(layer),
            _ => None,
        }
    }

    pub fn params_echo(&self) -> String {
        match self {
            MethodSpec::RectGrad { q } | MethodSpec::RectGradMod { q } => format!("q={q}"),
            MethodSpec::Lrp { rule } => match rule {
                RelevanceRule::LrpGamma { gamma } => format!("gamma={gamma}"),
                RelevanceRule::LrpZPlus => "gamma=inf".into(),
            },
            _ => String::new(),
        }
    }
}

fn input_resolution(trace: &ForwardTrace) -> Result<(usize, usize)> {
    let shape = trace.input().shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "saliency",
            format!("input must be (channels, h, w), got {shape:?}"),
        ));
    }
    Ok((shape[1], shape[2]))
}

fn layer_activation<'t>(
    model: &Model,
    trace: &'t ForwardTrace,
    layer: &str,
) -> Result<(usize, &'t Tensor)> {
    let idx = resolve_activation_index(model, &LayerRef::Block(layer.to_string()))?;
    let act = trace.layer_output(idx);
    if act.ndim() != 3 {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} has no spatial activations"
        )));
    }
    Ok((idx, act))
}

fn finish(
    map: Tensor,
    trace: &ForwardTrace,
    method_id: &str,
    layer: Option<&str>,
    class_index: usize,
) -> Result<SaliencyMap> {
    let (h, w) = input_resolution(trace)?;
    let values = bilinear_upsample(&map, h, w)?;
    Ok(SaliencyMap {
        values,
        method_id: method_id.into(),
        layer_ref: layer.map(str::to_string),
        class_index,
    })
}

/// Channel weights w_k: spatial mean of the gradient per channel.
fn channel_mean_weights(grads: &Tensor) -> Vec<f64> {
    let (c, h, w) = (grads.shape()[0], grads.shape()[1], grads.shape()[2]);
    let z = (h * w) as f64;
    (0..c)
        .map(|k| grads.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / z)
        .collect()
}

fn weighted_channel_sum(activations: &Tensor, weights: &[f64]) -> Tensor {
    let (c, h, w) = (
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    );
    let mut out = vec![0.0; h * w];
    for k in 0..c {
        let wk = weights[k];
        if wk == 0.0 {
            continue;
        }
        let plane = &activations.data()[k * h * w..(k + 1) * h * w];
        for (o, v) in out.iter_mut().zip(plane) {
            *o += wk * v;
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// GradCAM's linear (pre-ReLU) combination at layer resolution. On a
/// GAP-head model this equals the CAM map.
pub fn gradcam_linear(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<Tensor> {
    let (_, act) = layer_activation(model, trace, layer)?;
    let grads = grad_wrt_layer(model, trace, class_index, &LayerRef::Block(layer.into()))?;
    Ok(weighted_channel_sum(act, &channel_mean_weights(&grads)))
}

/// GradCAM: ReLU of the mean-gradient-weighted channel sum, upsampled.
pub fn gradcam(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    let linear = gradcam_linear(model, trace, class_index, layer)?;
    finish(
        linear.map(|v| v.max(0.0)),
        trace,
        "gradcam",
        Some(layer),
        class_index,
    )
}

pub(crate) fn gradcam_pos_from_parts(
    activations: &Tensor,
    grads: &Tensor,
    placement: PosAbsPlacement,
) -> Tensor {
    let weights: Vec<f64> = match placement {
        PosAbsPlacement::OnWeight => channel_mean_weights(grads)
            .into_iter()
            .map(f64::abs)
            .collect(),
        PosAbsPlacement::InsideMean => channel_mean_weights(&grads.map(f64::abs)),
    };
    weighted_channel_sum(activations, &weights)
}

/// GradCAM with an absolute value on the channel weights; no outer ReLU
/// is needed because post-ReLU activations are nonnegative.
pub fn gradcam_pos(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    gradcam_pos_with(model, trace, class_index, layer, MethodOptions::default())
}

pub fn gradcam_pos_with(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
    options: MethodOptions,
) -> Result<SaliencyMap> {
    let (_, act) = layer_activation(model, trace, layer)?;
    let grads = grad_wrt_layer(model, trace, class_index, &LayerRef::Block(layer.into()))?;
    let map = gradcam_pos_from_parts(act, &grads, options.gradcam_pos_abs);
    finish(map, trace, "gradcam_pos", Some(layer), class_index)
}

pub(crate) fn gradcam_pp_from_parts(activations: &Tensor, grads: &Tensor) -> Tensor {
    let (c, h, w) = (grads.shape()[0], grads.shape()[1], grads.shape()[2]);
    let mut weights = vec![0.0; c];
    for k in 0..c {
        let plane_a = &activations.data()[k * h * w..(k + 1) * h * w];
        let plane_g = &grads.data()[k * h * w..(k + 1) * h * w];
        let act_sum: f64 = plane_a.iter().sum();
        let mut wk = 0.0;
        for &g in plane_g {
            let denom = 2.0 * g * g + act_sum * g * g * g;
            if denom.abs() < 1e-12 {
                continue;
            }
            let alpha = g * g / denom;
            wk += alpha * g.max(0.0);
        }
        weights[k] = wk;
    }
    weighted_channel_sum(activations, &weights).map(|v| v.max(0.0))
}

/// GradCAM++: per-unit alpha coefficients (exponential-output closed
/// form) weight the ReLU'd gradients before the channel sum.
pub fn gradcam_pp(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    let (_, act) = layer_activation(model, trace, layer)?;
    let grads = grad_wrt_layer(model, trace, class_index, &LayerRef::Block(layer.into()))?;
    let map = gradcam_pp_from_parts(act, &grads);
    finish(map, trace, "gradcam_pp", Some(layer), class_index)
}

pub(crate) fn gradmid_from_parts(grads: &Tensor, filter: PositiveFilter) -> Tensor {
    let (c, h, w) = (grads.shape()[0], grads.shape()[1], grads.shape()[2]);
    let mut out = vec![0.0; h * w];
    for k in 0..c {
        let plane = &grads.data()[k * h * w..(k + 1) * h * w];
        for (o, &g) in out.iter_mut().zip(plane) {
            *o += match filter {
                PositiveFilter::Abs => g.abs(),
                PositiveFilter::Relu => g.max(0.0),
            };
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// GradMid: positive aggregation of the gradients alone, no activation
/// weighting.
pub fn gradmid(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    gradmid_with(model, trace, class_index, layer, MethodOptions::default())
}

pub fn gradmid_with(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    layer: &str,
    options: MethodOptions,
) -> Result<SaliencyMap> {
    layer_activation(model, trace, layer)?;
    let grads = grad_wrt_layer(model, trace, class_index, &LayerRef::Block(layer.into()))?;
    let map = gradmid_from_parts(&grads, options.gradmid_filter);
    finish(map, trace, "gradmid", Some(layer), class_index)
}

/// FullGrad's post-processing psi: absolute values, channel sum, upsample
/// to input resolution, then min-max normalize.
fn psi(tensor: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let collapsed = match tensor.ndim() {
        3 => {
            let (c, h, w) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
            let mut out = vec![0.0; h * w];
            for k in 0..c {
                let plane = &tensor.data()[k * h * w..(k + 1) * h * w];
                for (o, &v) in out.iter_mut().zip(plane) {
                    *o += v.abs();
                }
            }
            Tensor::from_parts(vec![h, w], out)
        }
        2 => tensor.map(f64::abs),
        _ => {
            return Err(Error::shape(
                "fullgrad",
                format!("psi expects a spatial tensor, got {:?}", tensor.shape()),
            ))
        }
    };
    Ok(minmax_normalize(&bilinear_upsample(&collapsed, out_h, out_w)?))
}

/// FullGrad: psi of the input-gradient times input, plus psi of each
/// spatial biased layer's pre-activation gradient times its bias.
pub fn fullgrad(model: &Model, trace: &ForwardTrace, class_index: usize) -> Result<SaliencyMap> {
    let (h, w) = input_resolution(trace)?;
    let bundle = backward(model, trace, class_index, ReluBackwardRule::Standard)?;

    let input = trace.input();
    let gx = bundle.input_grad();
    let weighted = Tensor::from_parts(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(gx.data())
            .map(|(x, g)| x * g)
            .collect(),
    );
    let mut total = psi(&weighted, h, w)?;

    for (l, layer) in model.layers().iter().enumerate() {
        let LayerSpec::Conv2d { bias, .. } = layer else {
            continue;
        };
        let pre_grad = bundle.layer_grad(l);
        if pre_grad.ndim() != 3 {
            continue;
        }
        let (c, gh, gw) = (pre_grad.shape()[0], pre_grad.shape()[1], pre_grad.shape()[2]);
        let mut term = vec![0.0; pre_grad.len()];
        for k in 0..c {
            let b = bias.data()[k];
            let plane = &pre_grad.data()[k * gh * gw..(k + 1) * gh * gw];
            for (t, &g) in term[k * gh * gw..(k + 1) * gh * gw].iter_mut().zip(plane) {
                *t = g * b;
            }
        }
        let term = psi(&Tensor::from_parts(pre_grad.shape().to_vec(), term), h, w)?;
        total = total.add(&term)?;
    }
    Ok(SaliencyMap {
        values: total,
        method_id: "fullgrad".into(),
        layer_ref: None,
        class_index,
    })
}

/// All-block sum of per-block min-max-normalized maps of the chosen kind.
pub fn cumulative(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    kind: CumulativeKind,
) -> Result<SaliencyMap> {
    cumulative_with(model, trace, class_index, kind, MethodOptions::default())
}

pub fn cumulative_with(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    kind: CumulativeKind,
    options: MethodOptions,
) -> Result<SaliencyMap> {
    let labels: Vec<String> = model.block_labels().iter().map(|s| s.to_string()).collect();
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "cumulative aggregation needs at least one block label".into(),
        ));
    }
    let (h, w) = input_resolution(trace)?;
    let mut total = Tensor::zeros(vec![h, w]);
    for label in &labels {
        let per_layer = match kind {
            CumulativeKind::GradCamPos => {
                gradcam_pos_with(model, trace, class_index, label, options)?
            }
            CumulativeKind::GradMid => gradmid_with(model, trace, class_index, label, options)?,
        };
        total = total.add(&minmax_normalize(&per_layer.values))?;
    }
    let method_id = match kind {
        CumulativeKind::GradCamPos => "cumulative_gradcam",
        CumulativeKind::GradMid => "cumulative_gradmid",
    };
    Ok(SaliencyMap {
        values: total,
        method_id: method_id.into(),
        layer_ref: None,
        class_index,
    })
}

/// Sum of absolute values across the channel dimension of an input-shaped
/// signal; the standard collapse for signed propagation maps.
fn collapse_channels_abs(signal: &Tensor) -> Result<Tensor> {
    if signal.ndim() != 3 {
        return Err(Error::shape(
            "propagation_map",
            format!("expected (channels, h, w) signal, got {:?}", signal.shape()),
        ));
    }
    let (c, h, w) = (signal.shape()[0], signal.shape()[1], signal.shape()[2]);
    let mut out = vec![0.0; h * w];
    for k in 0..c {
        let plane = &signal.data()[k * h * w..(k + 1) * h * w];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += v.abs();
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Runs a propagation method to the input and collapses channels by
/// absolute sum. No normalization is applied.
pub fn propagation_map(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    spec: &PropagationSpec,
) -> Result<SaliencyMap> {
    let (bundle, id): (GradientBundle, &str) = match spec {
        PropagationSpec::Gradients => (
            backward(model, trace, class_index, ReluBackwardRule::Standard)?,
            "gradients",
        ),
        PropagationSpec::GuidedBp => (
            backward(model, trace, class_index, ReluBackwardRule::Guided)?,
            "guided_bp",
        ),
        PropagationSpec::RectGrad { q } => (
            backward(model, trace, class_index, ReluBackwardRule::RectGrad { q: *q })?,
            "rectgrad",
        ),
        PropagationSpec::RectGradMod { q } => (
            backward(
                model,
                trace,
                class_index,
                ReluBackwardRule::RectGradMod { q: *q },
            )?,
            "rectgrad_mod",
        ),
        PropagationSpec::Lrp { rule } => {
            let id = match rule {
                RelevanceRule::LrpZPlus => "lrp_zplus",
                RelevanceRule::LrpGamma { gamma } if *gamma == 0.0 => "lrp_0",
                RelevanceRule::LrpGamma { .. } => "lrp_gamma",
            };
            (lrp(model, trace, class_index, *rule)?, id)
        }
    };
    Ok(SaliencyMap {
        values: collapse_channels_abs(bundle.input_grad())?,
        method_id: id.into(),
        layer_ref: None,
        class_index,
    })
}

/// Dispatches any method from the inventory.
pub fn compute_map(
    model: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    spec: &MethodSpec,
    options: MethodOptions,
) -> Result<SaliencyMap> {
    match spec {
        MethodSpec::GradCam { layer } => gradcam(model, trace, class_index, layer),
        MethodSpec::GradCamPos { layer } => {
            gradcam_pos_with(model, trace, class_index, layer, options)
        }
        MethodSpec::GradCamPp { layer } => gradcam_pp(model, trace, class_index, layer),
        MethodSpec::GradMid { layer } => gradmid_with(model, trace, class_index, layer, options),
        MethodSpec::FullGrad => fullgrad(model, trace, class_index),
        MethodSpec::CumulativeGradCam => {
            cumulative_with(model, trace, class_index, CumulativeKind::GradCamPos, options)
        }
        MethodSpec::CumulativeGradMid => {
            cumulative_with(model, trace, class_index, CumulativeKind::GradMid, options)
        }
        MethodSpec::Gradients => {
            propagation_map(model, trace, class_index, &PropagationSpec::Gradients)
        }
        MethodSpec::GuidedBp => {
            propagation_map(model, trace, class_index, &PropagationSpec::GuidedBp)
        }
        MethodSpec::RectGrad { q } => {
            propagation_map(model, trace, class_index, &PropagationSpec::RectGrad { q: *q })
        }
        MethodSpec::RectGradMod { q } => propagation_map(
            model,
            trace,
            class_index,
            &PropagationSpec::RectGradMod { q: *q },
        ),
        MethodSpec::Lrp { rule } => {
            propagation_map(model, trace, class_index, &PropagationSpec::Lrp { rule: *rule })
        }
    }
}
