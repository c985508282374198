//! Synthetic multi-object shapes benchmark: grayscale images containing
//! squares, disks, triangles and crosses with exact per-shape masks. The
//! evaluation split has two non-overlapping shapes of distinct classes
//! per image; the training split has one shape per image.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::protocols::{Mask, Sample, SampleObject};
use crate::tensor::Tensor;

/// Class vocabulary, index order is the label encoding.
pub const CLASS_NAMES: [&str; 4] = ["square", "disk", "triangle", "cross"];

pub const NOISE_STD: f64 = 0.05;
const MIN_SIZE: usize = 10;
const MAX_SIZE: usize = 16;
const SEPARATION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Square = 0,
    Disk = 1,
    Triangle = 2,
    Cross = 3,
}

impl ShapeClass {
    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(ShapeClass::Square),
            1 => Ok(ShapeClass::Disk),
            2 => Ok(ShapeClass::Triangle),
            3 => Ok(ShapeClass::Cross),
            _ => Err(Error::InvalidArgument(format!("unknown shape class {index}"))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }
}

/// A shape instance: class, continuous center and overall extent in px.
#[derive(Debug, Clone, Copy)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub cy: f64,
    pub cx: f64,
    pub size: f64,
}

impl ShapeSpec {
    /// Ideal area of the continuous shape, in pixels.
    pub fn area(&self) -> f64 {
        let s = self.size;
        match self.class {
            ShapeClass::Square => s * s,
            ShapeClass::Disk => std::f64::consts::PI * (s / 2.0) * (s / 2.0),
            ShapeClass::Triangle => s * s / 2.0,
            ShapeClass::Cross => {
                let t = cross_thickness(s);
                2.0 * s * t - t * t
            }
        }
    }

    /// Generous perimeter estimate used to bound rasterization error.
    pub fn perimeter(&self) -> f64 {
        4.0 * self.size
    }
}

fn cross_thickness(size: f64) -> f64 {
    (size / 3.0).max(2.0)
}

fn inside(spec: &ShapeSpec, py: f64, px: f64) -> bool {
    let dy = py - spec.cy;
    let dx = px - spec.cx;
    let half = spec.size / 2.0;
    match spec.class {
        ShapeClass::Square => dy.abs() <= half && dx.abs() <= half,
        ShapeClass::Disk => dy * dy + dx * dx <= half * half,
        ShapeClass::Triangle => {
            // Apex up; width grows linearly toward the base.
            if dy < -half || dy > half {
                return false;
            }
            let half_width = (dy + half) / 2.0;
            dx.abs() <= half_width
        }
        ShapeClass::Cross => {
            let t = cross_thickness(spec.size) / 2.0;
            (dy.abs() <= t && dx.abs() <= half) || (dx.abs() <= t && dy.abs() <= half)
        }
    }
}

/// Rasterizes a shape onto an `h` x `w` grid by pixel-center membership.
pub fn rasterize(spec: &ShapeSpec, h: usize, w: usize) -> Mask {
    let mut bits = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if inside(spec, y as f64 + 0.5, x as f64 + 0.5) {
                bits[y * w + x] = true;
            }
        }
    }
    Mask { height: h, width: w, bits }
}

/// One generated image plus its shape specs and masks.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Grayscale image (1, h, w); values already quantized to the 8-bit
    /// grid so in-memory scenes agree with their PGM files exactly.
    pub image: Tensor,
    pub objects: Vec<(ShapeSpec, Mask)>,
}

impl Scene {
    pub fn to_sample(&self) -> Sample {
        Sample {
            image: self.image.clone(),
            objects: self
                .objects
                .iter()
                .map(|(spec, mask)| SampleObject {
                    class_index: spec.class.index(),
                    mask: mask.clone(),
                })
                .collect(),
        }
    }

    /// 8-bit pixels, row-major.
    pub fn pixels_u8(&self) -> Vec<u8> {
        self.image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }
}

fn masks_far_apart(a: &Mask, b: &Mask, separation: usize) -> bool {
    for y in 0..a.height {
        for x in 0..a.width {
            if a.contains(y, x) && b.contains_within(y, x, separation) {
                return false;
            }
        }
    }
    true
}

fn draw_shape(class: ShapeClass, extent: usize, rng: &mut ChaCha8Rng) -> ShapeSpec {
    let size = rng.gen_range(MIN_SIZE..=MAX_SIZE) as f64;
    let margin = size / 2.0 + 1.0;
    let cy = rng.gen_range(margin..(extent as f64 - margin));
    let cx = rng.gen_range(margin..(extent as f64 - margin));
    ShapeSpec { class, cy, cx, size }
}

fn distinct_class_pair(rng: &mut ChaCha8Rng) -> (ShapeClass, ShapeClass) {
    let a = rng.gen_range(0..4usize);
    let mut b = rng.gen_range(0..3usize);
    if b >= a {
        b += 1;
    }
    (
        ShapeClass::from_index(a).unwrap(),
        ShapeClass::from_index(b).unwrap(),
    )
}

fn render_scene(extent: usize, shapes: &[(ShapeSpec, Mask)], rng: &mut ChaCha8Rng) -> Tensor {
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut data = vec![0.0f64; extent * extent];
    for (_, mask) in shapes {
        for (v, &m) in data.iter_mut().zip(&mask.bits) {
            if m {
                *v = 1.0;
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        // Snap to the 8-bit grid the files use.
        *v = (*v * 255.0).round() / 255.0;
    }
    Tensor::from_parts(vec![1, extent, extent], data)
}

/// Generates one evaluation scene: two non-overlapping shapes of distinct
/// classes with at least 2 px of separation.
pub fn generate_eval_scene(extent: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    if extent < 2 * MIN_SIZE + SEPARATION + 4 {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} too small for two {MIN_SIZE}px shapes"
        )));
    }
    let (class_a, class_b) = distinct_class_pair(rng);
    for _ in 0..1000 {
        let a = draw_shape(class_a, extent, rng);
        let b = draw_shape(class_b, extent, rng);
        let mask_a = rasterize(&a, extent, extent);
        let mask_b = rasterize(&b, extent, extent);
        if mask_a.pixel_count() == 0 || mask_b.pixel_count() == 0 {
            continue;
        }
        if !masks_far_apart(&mask_a, &mask_b, SEPARATION) {
            continue;
        }
        let shapes = vec![(a, mask_a), (b, mask_b)];
        let image = render_scene(extent, &shapes, rng);
        return Ok(Scene { image, objects: shapes });
    }
    Err(Error::InvalidArgument(
        "could not place two disjoint shapes; extent too small".into(),
    ))
}

/// Generates one single-shape training scene; classes cycle with `index`
/// so the split stays balanced.
pub fn generate_train_scene(extent: usize, index: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    if extent < MAX_SIZE + 4 {
        return Err(Error::InvalidArgument(format!(
            "extent {extent} too small for a {MAX_SIZE}px shape"
        )));
    }
    let class = ShapeClass::from_index(index % 4).unwrap();
    let spec = draw_shape(class, extent, rng);
    let mask = rasterize(&spec, extent, extent);
    let shapes = vec![(spec, mask)];
    let image = render_scene(extent, &shapes, rng);
    Ok(Scene { image, objects: shapes })
}

/// Deterministic scene stream for a whole split.
pub fn generate_split(
    extent: usize,
    count: usize,
    seed: u64,
    multi_object: bool,
) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let scene = if multi_object {
            generate_eval_scene(extent, &mut rng)?
        } else {
            generate_train_scene(extent, i, &mut rng)?
        };
        scenes.push(scene);
    }
    Ok(scenes)
}
