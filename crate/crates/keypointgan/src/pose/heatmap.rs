use ndarray::{Array3, Array4, ArrayView3, ArrayView4};

use crate::pose::render::center_coord;
use crate::pose::KeypointSet;

/// Normalized pixel-center coordinates for an `H x W` grid, returned as
/// `(xs[col], ys[row])`.
pub fn pixel_centers(height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let xs = (0..width).map(|c| center_coord(c, width)).collect();
    let ys = (0..height).map(|r| center_coord(r, height)).collect();
    (xs, ys)
}

/// Spatial-softmax keypoint readout: each `H x W` heatmap is normalized into
/// a probability distribution and the keypoint is the expectation of the
/// normalized pixel-center coordinates under it.
pub fn keypoints_from_heatmaps(heatmaps: ArrayView3<'_, f64>) -> KeypointSet {
    let (k, h, w) = heatmaps.dim();
    let (xs, ys) = pixel_centers(h, w);
    let mut coords = Vec::with_capacity(k);
    for ki in 0..k {
        let map = heatmaps.index_axis(ndarray::Axis(0), ki);
        let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut ex = 0.0;
        let mut ey = 0.0;
        for row in 0..h {
            for col in 0..w {
                let p = (map[[row, col]] - max).exp();
                z += p;
                ex += p * xs[col];
                ey += p * ys[row];
            }
        }
        coords.push([ex / z, ey / z]);
    }
    KeypointSet::new(coords).expect("softmax expectation is always finite")
}

/// Batch f32 spatial softmax over `(B, K, H, W)` heatmaps. Returns the
/// `(B, K, 2)` coordinates and the `(B, K, H, W)` probabilities needed by
/// the backward pass.
pub fn keypoints_from_heatmaps_batch(
    heatmaps: ArrayView4<'_, f32>,
) -> (Array3<f32>, Array4<f32>) {
    let (b, k, h, w) = heatmaps.dim();
    let (xs, ys) = pixel_centers(h, w);
    let mut coords = Array3::<f32>::zeros((b, k, 2));
    let mut probs = Array4::<f32>::zeros((b, k, h, w));
    for bi in 0..b {
        for ki in 0..k {
            let mut max = f32::NEG_INFINITY;
            for row in 0..h {
                for col in 0..w {
                    max = max.max(heatmaps[[bi, ki, row, col]]);
                }
            }
            let mut z = 0.0f64;
            let mut ex = 0.0f64;
            let mut ey = 0.0f64;
            for row in 0..h {
                for col in 0..w {
                    let p = ((heatmaps[[bi, ki, row, col]] - max) as f64).exp();
                    probs[[bi, ki, row, col]] = p as f32;
                    z += p;
                    ex += p * xs[col];
                    ey += p * ys[row];
                }
            }
            let zi = 1.0 / z;
            coords[[bi, ki, 0]] = (ex * zi) as f32;
            coords[[bi, ki, 1]] = (ey * zi) as f32;
            for row in 0..h {
                for col in 0..w {
                    probs[[bi, ki, row, col]] = (probs[[bi, ki, row, col]] as f64 * zi) as f32;
                }
            }
        }
    }
    (coords, probs)
}

/// Backward pass for [`keypoints_from_heatmaps_batch`]:
/// `d coord_x / d h[p] = prob[p] * (x_center[p] - coord_x)`.
pub fn keypoints_from_heatmaps_batch_backward(
    grad_coords: ArrayView3<'_, f32>,
    coords: ArrayView3<'_, f32>,
    probs: ArrayView4<'_, f32>,
) -> Array4<f32> {
    let (b, k, h, w) = probs.dim();
    let (xs, ys) = pixel_centers(h, w);
    let mut grad = Array4::<f32>::zeros((b, k, h, w));
    for bi in 0..b {
        for ki in 0..k {
            let gx = grad_coords[[bi, ki, 0]] as f64;
            let gy = grad_coords[[bi, ki, 1]] as f64;
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let cx = coords[[bi, ki, 0]] as f64;
            let cy = coords[[bi, ki, 1]] as f64;
            for row in 0..h {
                for col in 0..w {
                    let p = probs[[bi, ki, row, col]] as f64;
                    grad[[bi, ki, row, col]] =
                        (p * ((xs[col] - cx) * gx + (ys[row] - cy) * gy)) as f32;
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn constant_heatmap_gives_grid_center() {
        let h = Array3::<f64>::from_elem((1, 9, 9), 0.3);
        let kp = keypoints_from_heatmaps(h.view());
        assert_abs_diff_eq!(kp.coords()[0][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kp.coords()[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn saturated_peak_gives_pixel_center() {
        let mut h = Array3::<f64>::zeros((1, 8, 8));
        h[[0, 0, 0]] = 60.0;
        let kp = keypoints_from_heatmaps(h.view());
        let expected = center_coord(0, 8);
        assert!((kp.coords()[0][0] - expected).abs() < 1e-3);
        assert!((kp.coords()[0][1] - expected).abs() < 1e-3);
    }

    #[test]
    fn mirrored_peaks_average_x() {
        let mut h = Array3::<f64>::zeros((1, 8, 8));
        // Two equal peaks at mirrored columns of row 2.
        h[[0, 2, 1]] = 10.0;
        h[[0, 2, 6]] = 10.0;
        let kp = keypoints_from_heatmaps(h.view());
        assert_abs_diff_eq!(kp.coords()[0][0], 0.0, epsilon = 1e-9);
        // y sits between row-2 mass and the residual uniform mass; with two
        // dominant peaks it approaches the row-2 center.
        let y2 = center_coord(2, 8);
        assert!((kp.coords()[0][1] - y2).abs() < 1e-2);
    }

    #[test]
    fn delta_heatmap_recovers_location_exactly() {
        for (row, col) in [(0usize, 0usize), (3, 7), (7, 4)] {
            let mut h = Array3::<f64>::zeros((1, 8, 8));
            h[[0, row, col]] = 1e4;
            let kp = keypoints_from_heatmaps(h.view());
            assert_abs_diff_eq!(kp.coords()[0][0], center_coord(col, 8), epsilon = 1e-9);
            assert_abs_diff_eq!(kp.coords()[0][1], center_coord(row, 8), epsilon = 1e-9);
        }
    }

    #[test]
    fn coords_strictly_inside_unit_box() {
        let mut h = Array3::<f64>::zeros((2, 6, 6));
        h[[0, 0, 0]] = 100.0;
        h[[1, 5, 5]] = 100.0;
        let kp = keypoints_from_heatmaps(h.view());
        for c in kp.coords() {
            assert!(c[0] > -1.0 && c[0] < 1.0);
            assert!(c[1] > -1.0 && c[1] < 1.0);
        }
    }

    #[test]
    fn batch_backward_matches_finite_differences() {
        use ndarray::Array4;
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut h = Array4::<f32>::zeros((1, 2, 6, 6));
        for v in h.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (coords, probs) = keypoints_from_heatmaps_batch(h.view());
        // Loss = sum of all coordinates.
        let gc = Array3::<f32>::ones((1, 2, 2));
        let grad = keypoints_from_heatmaps_batch_backward(gc.view(), coords.view(), probs.view());
        let loss = |h: &Array4<f32>| -> f64 {
            let (c, _) = keypoints_from_heatmaps_batch(h.view());
            c.iter().map(|&x| x as f64).sum()
        };
        let step = 1e-3;
        for probe in [(0, 0, 0, 0), (0, 1, 3, 2), (0, 0, 5, 5)] {
            let mut hp = h.clone();
            hp[probe] += step;
            let up = loss(&hp);
            hp[probe] -= 2.0 * step;
            let dn = loss(&hp);
            let fd = (up - dn) / (2.0 * step as f64);
            let an = grad[probe] as f64;
            assert!(
                (fd - an).abs() < 1e-3,
                "fd {fd} vs analytic {an} at {probe:?}"
            );
        }
    }
}
