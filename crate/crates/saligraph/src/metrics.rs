//! Numeric primitives for the evaluation protocols: a HOG descriptor for
//! map-to-map similarity, Spearman rank correlation with tie handling,
//! and the argmax locator used by the pointing game.

use crate::error::{Error, Result};
use crate::tensor::{minmax_normalize, Tensor};

/// HOG parameters; fixed defaults are echoed in every eval record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HogParams {
    pub cell: usize,
    pub bins: usize,
}

impl Default for HogParams {
    fn default() -> Self {
        HogParams { cell: 8, bins: 9 }
    }
}

/// HOG descriptor of a 2-d map: min-max normalize, centered-difference
/// gradients (edge-replicated), unsigned orientation histogram with
/// linear interpolation between bin centers at i*(180/bins) degrees,
/// 2x2-cell blocks L2-normalized and concatenated.
pub fn hog(map: &Tensor, params: HogParams) -> Result<Vec<f64>> {
    if map.ndim() != 2 {
        return Err(Error::shape("hog", format!("expected 2-d map, got {:?}", map.shape())));
    }
    let cell = params.cell;
    let bins = params.bins;
    if cell == 0 || bins == 0 {
        return Err(Error::InvalidArgument("hog cell and bins must be positive".into()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if h < cell || w < cell {
        return Err(Error::InvalidArgument(format!(
            "map {h}x{w} smaller than one {cell}x{cell} cell"
        )));
    }

    let norm = minmax_normalize(map);
    // Pad to cell multiples with edge replication.
    let ph = h.div_ceil(cell) * cell;
    let pw = w.div_ceil(cell) * cell;
    let value = |y: usize, x: usize| norm.at2(y.min(h - 1), x.min(w - 1));

    let cells_y = ph / cell;
    let cells_x = pw / cell;
    let mut hist = vec![0.0; cells_y * cells_x * bins];
    let bin_width = 180.0 / bins as f64;
    for y in 0..ph {
        for x in 0..pw {
            let gx = value(y, (x + 1).min(pw - 1)) - value(y, x.saturating_sub(1));
            let gy = value((y + 1).min(ph - 1), x) - value(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx).to_degrees();
            if theta < 0.0 {
                theta += 180.0;
            }
            if theta >= 180.0 {
                theta -= 180.0;
            }
            let pos = theta / bin_width;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let bin_lo = lo % bins;
            let bin_hi = (lo + 1) % bins;
            let base = ((y / cell) * cells_x + (x / cell)) * bins;
            hist[base + bin_lo] += mag * (1.0 - frac);
            hist[base + bin_hi] += mag * frac;
        }
    }

    // 2x2-cell blocks, stride one cell, L2 normalization per block.
    let blocks_y = cells_y - 1;
    let blocks_x = cells_x - 1;
    if blocks_y == 0 || blocks_x == 0 {
        return Err(Error::InvalidArgument(format!(
            "map {h}x{w} too small for 2x2 blocks of {cell}px cells"
        )));
    }
    let block_dim = 4 * bins;
    let mut descriptor = vec![0.0; blocks_y * blocks_x * block_dim];
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let out = &mut descriptor
                [(by * blocks_x + bx) * block_dim..(by * blocks_x + bx + 1) * block_dim];
            let mut k = 0;
            for cy in 0..2 {
                for cx in 0..2 {
                    let base = ((by + cy) * cells_x + (bx + cx)) * bins;
                    out[k..k + bins].copy_from_slice(&hist[base..base + bins]);
                    k += bins;
                }
            }
            let norm_sq: f64 = out.iter().map(|v| v * v).sum();
            if norm_sq.sqrt() >= 1e-12 {
                let inv = 1.0 / norm_sq.sqrt();
                for v in out.iter_mut() {
                    *v *= inv;
                }
            } else {
                for v in out.iter_mut() {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(descriptor)
}

/// Average ranks (1-based); tied values share the mean of their ranks.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Constant vectors correlate with nothing and return 0 by convention.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "spearman length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 values".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(a) || constant(b) {
        return Ok(0.0);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        let dx = x - mean;
        let dy = y - mean;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    let denom = (var_a * var_b).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / denom).clamp(-1.0, 1.0))
}

/// Location of the maximum of a 2-d map; ties go to the smallest
/// row-major index.
pub fn argmax_location(map: &Tensor) -> (usize, usize) {
    debug_assert_eq!(map.ndim(), 2);
    let w = map.shape()[1];
    let mut best = 0;
    for (i, v) in map.data().iter().enumerate() {
        if *v > map.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hog_of_constant_map_is_zero() {
        let map = Tensor::filled(vec![32, 32], 3.0);
        let d = hog(&map, HogParams::default()).unwrap();
        assert_eq!(d.len(), 324);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hog_descriptor_length_is_block_count_times_block_dim() {
        let map = Tensor::new(vec![32, 32], (0..1024).map(|v| (v % 11) as f64).collect()).unwrap();
        let d = hog(&map, HogParams::default()).unwrap();
        // 4x4 cells -> 3x3 blocks -> 3*3*4*9.
        assert_eq!(d.len(), 324);
    }

    #[test]
    fn hog_horizontal_ramp_energy_sits_in_bin_zero() {
        let map = Tensor::new(
            vec![32, 32],
            (0..1024).map(|i| (i % 32) as f64).collect(),
        )
        .unwrap();
        let d = hog(&map, HogParams::default()).unwrap();
        let mut total = 0.0;
        let mut bin0 = 0.0;
        for (i, v) in d.iter().enumerate() {
            total += v.abs();
            if i % 9 == 0 {
                bin0 += v.abs();
            }
        }
        assert!(total > 0.0);
        assert!((total - bin0).abs() < 1e-12, "energy leaked out of bin 0");
    }

    #[test]
    fn hog_pads_non_multiple_extents() {
        let map = Tensor::new(vec![20, 20], (0..400).map(|v| (v % 13) as f64).collect()).unwrap();
        // Pads to 24x24 -> 3x3 cells -> 2x2 blocks.
        let d = hog(&map, HogParams::default()).unwrap();
        assert_eq!(d.len(), 2 * 2 * 36);
    }

    #[test]
    fn hog_rejects_tiny_maps() {
        let map = Tensor::zeros(vec![4, 4]);
        assert!(hog(&map, HogParams::default()).is_err());
    }

    #[test]
    fn spearman_identity_reversal_and_hand_value() {
        let x = [1.0, 5.0, 3.0, 2.0];
        assert_eq!(spearman(&x, &x).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &neg).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        assert!((r - -0.5).abs() < 1e-12, "{r}");
    }

    #[test]
    fn spearman_tie_handling_uses_average_ranks() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        // Both vectors share tie structure -> perfect correlation.
        let r = spearman(&[1.0, 1.0, 2.0], &[5.0, 5.0, 9.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_convention_and_errors() {
        assert_eq!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn argmax_tie_breaking_is_row_major() {
        let all_equal = Tensor::filled(vec![3, 3], 1.0);
        assert_eq!(argmax_location(&all_equal), (0, 0));

        let mut data = vec![0.0; 6 * 7];
        data[3 * 7 + 5] = 2.0;
        let spike = Tensor::new(vec![6, 7], data).unwrap();
        assert_eq!(argmax_location(&spike), (3, 5));

        let mut data = vec![0.0; 4 * 4];
        data[4 + 1] = 3.0; // (1, 1)
        data[2 * 4] = 3.0; // (2, 0)
        let tie = Tensor::new(vec![4, 4], data).unwrap();
        assert_eq!(argmax_location(&tie), (1, 1));
    }

    proptest! {
        // Spearman only sees ranks, so strictly monotone transforms of
        // either argument leave it unchanged.
        #[test]
        fn spearman_is_invariant_under_monotone_transforms(
            xs in proptest::collection::vec(-100.0f64..100.0, 5..30),
            ys in proptest::collection::vec(-100.0f64..100.0, 5..30),
        ) {
            let n = xs.len().min(ys.len());
            let a = &xs[..n];
            let b = &ys[..n];
            let transformed: Vec<f64> = a.iter().map(|v| (v / 50.0).exp() * 3.0 + 1.0).collect();
            let r1 = spearman(a, b).unwrap();
            let r2 = spearman(&transformed, b).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }
}
