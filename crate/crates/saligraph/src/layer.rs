//! Layer definitions and their forward kernels. Everything runs on plain
//! `Tensor`s in double precision; there is no implicit batching, one call
//! processes one example.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a sequential model.
///
/// Convolution weights are `[out_ch, in_ch, kh, kw]`, affine weights are
/// `[out, in]`; biases always have one entry per output channel/unit.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Affine {
        weights: Tensor,
        bias: Tensor,
    },
}

impl LayerSpec {
    pub fn conv2d(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weights.ndim() != 4 {
            return Err(Error::shape(
                "Conv2d",
                format!("weights must be 4-d, got {:?}", weights.shape()),
            ));
        }
        if bias.ndim() != 1 || bias.shape()[0] != weights.shape()[0] {
            return Err(Error::shape(
                "Conv2d",
                format!(
                    "bias {:?} must have one entry per output channel ({})",
                    bias.shape(),
                    weights.shape()[0]
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("Conv2d stride must be positive".into()));
        }
        Ok(LayerSpec::Conv2d { weights, bias, stride, padding })
    }

    pub fn affine(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.ndim() != 2 {
            return Err(Error::shape(
                "Affine",
                format!("weights must be 2-d, got {:?}", weights.shape()),
            ));
        }
        if bias.ndim() != 1 || bias.shape()[0] != weights.shape()[0] {
            return Err(Error::shape(
                "Affine",
                format!(
                    "bias {:?} must have one entry per output unit ({})",
                    bias.shape(),
                    weights.shape()[0]
                ),
            ));
        }
        Ok(LayerSpec::Affine { weights, bias })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Affine { .. } => "affine",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Affine { .. })
    }

    pub fn parameters(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            LayerSpec::Conv2d { weights, bias, .. } | LayerSpec::Affine { weights, bias } => {
                Some((weights, bias))
            }
            _ => None,
        }
    }

    /// Output shape for a given input shape, or a shape error naming the
    /// layer and the offending dimensions.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv2d { weights, stride, padding, .. } => {
                let (out_ch, in_ch, kh, kw) = conv_dims(weights);
                if input.len() != 3 || input[0] != in_ch {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input {:?} does not match {in_ch} input channels", input),
                    ));
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * padding < kh || w + 2 * padding < kw {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
                    ));
                }
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                Ok(vec![out_ch, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } => {
                if input.len() != 3 {
                    return Err(Error::shape(
                        "max_pool",
                        format!("expected 3-d input, got {input:?}"),
                    ));
                }
                let (h, w) = (input[1], input[2]);
                if h < *kernel || w < *kernel {
                    return Err(Error::shape(
                        "max_pool",
                        format!("window {kernel} larger than input {h}x{w}"),
                    ));
                }
                Ok(vec![
                    input[0],
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Affine { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                if input.len() != 1 || input[0] != inp {
                    return Err(Error::shape(
                        "affine",
                        format!("input {input:?} does not match weight columns {inp}"),
                    ));
                }
                Ok(vec![out])
            }
        }
    }
}

pub(crate) fn conv_dims(weights: &Tensor) -> (usize, usize, usize, usize) {
    let s = weights.shape();
    (s[0], s[1], s[2], s[3])
}

/// Applies one layer to one input tensor.
pub fn apply_layer(input: &Tensor, layer: &LayerSpec) -> Result<Tensor> {
    let out_shape = layer.output_shape(input.shape())?;
    match layer {
        LayerSpec::Conv2d { weights, bias, stride, padding } => {
            Ok(conv2d_forward(input, weights, bias, *stride, *padding, &out_shape))
        }
        LayerSpec::Relu => Ok(input.map(|v| v.max(0.0))),
        LayerSpec::MaxPool { kernel, stride } => {
            Ok(maxpool_forward(input, *kernel, *stride, &out_shape))
        }
        LayerSpec::Flatten => input.reshaped(out_shape),
        LayerSpec::Affine { weights, bias } => Ok(affine_forward(input, weights, bias)),
    }
}

fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let (out_ch, in_ch, kh, kw) = conv_dims(weights);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let wgt = weights.data();
    let mut out = vec![0.0; out_ch * oh * ow];
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
                        let row_in = in_base + iy as usize * w;
                        let row_out = out_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            out[row_out + ox] += wv * x[row_in + ix as usize];
                        }
                    }
                }
            }
        }
        let b = bias.data()[co];
        if b != 0.0 {
            for v in &mut out[out_base..out_base + oh * ow] {
                *v += b;
            }
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize, out_shape: &[usize]) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * oh + oy) * ow + ox] =
                    pool_window_max(x, ch, h, w, oy * stride, ox * stride, kernel).0;
            }
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Max over a pooling window and the flat index of the winner. Ties go to
/// the first index in row-major scan order, which the backward pass must
/// reproduce exactly.
pub(crate) fn pool_window_max(
    x: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    kernel: usize,
) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for ky in 0..kernel {
        for kx in 0..kernel {
            let idx = (ch * h + y0 + ky) * w + x0 + kx;
            if x[idx] > best {
                best = x[idx];
                best_idx = idx;
            }
        }
    }
    (best, best_idx)
}

fn affine_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Tensor {
    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
    let x = input.data();
    let wgt = weights.data();
    let mut y = bias.data().to_vec();
    for o in 0..out {
        let row = &wgt[o * inp..(o + 1) * inp];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        y[o] += acc;
    }
    Tensor::from_parts(vec![out], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones_kernel_conv() -> LayerSpec {
        let weights = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let bias = Tensor::zeros(vec![1]);
        LayerSpec::conv2d(weights, bias, 1, 0).unwrap()
    }

    #[test]
    fn identity_conv_reproduces_input() {
        let weights = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let conv = LayerSpec::conv2d(weights, Tensor::zeros(vec![2]), 1, 0).unwrap();
        let input = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let out = apply_layer(&input, &conv).unwrap();
        assert!(out.bits_eq(&input));
    }

    #[test]
    fn conv_matches_hand_summation() {
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let out = apply_layer(&input, &ones_kernel_conv()).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let out = apply_layer(&input, &LayerSpec::Relu).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let input = Tensor::new(
            vec![1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 1.0, //
                3.0, 4.0, 1.0, 1.0, //
                0.0, 0.0, 9.0, 8.0, //
                0.0, 0.0, 7.0, 6.0,
            ],
        )
        .unwrap();
        let out = apply_layer(&input, &LayerSpec::MaxPool { kernel: 2, stride: 2 }).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 0.0, 9.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let input = Tensor::zeros(vec![2, 3, 3]);
        let err = apply_layer(&input, &ones_kernel_conv()).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
    }

    proptest! {
        // Bias-free convolution is linear in its input.
        #[test]
        fn conv_is_linear_without_bias(
            xs in proptest::collection::vec(-5.0f64..5.0, 9),
            ys in proptest::collection::vec(-5.0f64..5.0, 9),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let conv = ones_kernel_conv();
            let x = Tensor::new(vec![1, 3, 3], xs.clone()).unwrap();
            let y = Tensor::new(vec![1, 3, 3], ys.clone()).unwrap();
            let mixed = Tensor::new(
                vec![1, 3, 3],
                xs.iter().zip(&ys).map(|(xv, yv)| a * xv + b * yv).collect(),
            )
            .unwrap();
            let lhs = apply_layer(&mixed, &conv).unwrap();
            let fx = apply_layer(&x, &conv).unwrap();
            let fy = apply_layer(&y, &conv).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * fx.data()[i] + b * fy.data()[i];
                let tol = 1e-10 * rhs.abs().max(1.0);
                prop_assert!((lhs.data()[i] - rhs).abs() <= tol);
            }
        }

        #[test]
        fn upsample_preserves_constants(c in -10.0f64..10.0, h in 1usize..4, w in 1usize..4) {
            let m = Tensor::filled(vec![h, w], c);
            let up = crate::tensor::bilinear_upsample(&m, h + 3, w + 2).unwrap();
            prop_assert!(up.data().iter().all(|&v| v == c));
        }
    }
}
