//! Dense row-major tensors in double precision and the two resampling
//! primitives the saliency pipeline is built on (corner-aligned bilinear
//! upsampling and min-max normalization).

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite `f64` values, row-major.
///
/// Tensors are immutable values once built; every operation returns a new
/// tensor, so they can be shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents are positive, the data
    /// length matches and every element is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} implies {expected} elements, got {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; len])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape, vec![value; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Reinterprets the same data under a new shape of equal volume.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("cannot view {} elements as {shape:?}", self.data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    /// Value at (row, col) of a 2-d tensor.
    pub fn at2(&self, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[y * self.shape[1] + x]
    }

    /// Value at (channel, row, col) of a 3-d tensor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    /// One channel of a 3-d tensor as a 2-d tensor.
    pub fn channel(&self, c: usize) -> Tensor {
        debug_assert_eq!(self.ndim(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        let start = c * h * w;
        Tensor::from_parts(vec![h, w], self.data[start..start + h * w].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::add",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Exact bit-level equality, used where determinism is contractual.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Corner-aligned bilinear upsampling of a 2-d map to `(out_h, out_w)`.
///
/// Corners of the output grid land exactly on corners of the input grid;
/// a same-size request reproduces the input bitwise. Downscaling is
/// rejected.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.ndim() != 2 {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("expected 2-d map, got {:?}", map.shape()),
        ));
    }
    let (in_h, in_w) = (map.shape()[0], map.shape()[1]);
    if out_h < in_h || out_w < in_w {
        return Err(Error::InvalidArgument(format!(
            "bilinear_upsample cannot downscale {in_h}x{in_w} to {out_h}x{out_w}"
        )));
    }
    let mut out = vec![0.0; out_h * out_w];
    let scale_y = if out_h > 1 && in_h > 1 {
        (in_h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if out_w > 1 && in_w > 1 {
        (in_w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for y in 0..out_h {
        let sy = y as f64 * scale_y;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = x as f64 * scale_x;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            let top = map.at2(y0, x0) * (1.0 - fx) + map.at2(y0, x1) * fx;
            let bot = map.at2(y1, x0) * (1.0 - fx) + map.at2(y1, x1) * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// Affine rescale of a 2-d map to [0, 1]. A constant map maps to all
/// zeros so it contributes nothing to cumulative sums.
pub fn minmax_normalize(map: &Tensor) -> Tensor {
    let lo = map.min();
    let hi = map.max();
    if hi > lo {
        let range = hi - lo;
        map.map(|v| (v - lo) / range)
    } else {
        Tensor::zeros(map.shape().to_vec())
    }
}
