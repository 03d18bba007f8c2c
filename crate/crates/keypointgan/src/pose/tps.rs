use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Smooth random warp: a thin-plate-spline displacement field on a square
/// control grid plus an affine part.
///
/// The warp's map `S(q)` takes *output* coordinates to *source sampling*
/// coordinates (backward warping), so [`tps_apply`] needs no inversion.
/// Where a point lands in the warped image is therefore `S^-1`, provided by
/// [`ThinPlateSplineWarp::push_point`] via fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinPlateSplineWarp {
    control_points: Vec<[f64; 2]>,
    displacements: Vec<[f64; 2]>,
    /// Row-major 2x3 matrix applied as `A * [x, y, 1]`.
    affine: [[f64; 3]; 2],
    /// RBF weights solved so the interpolant hits every control displacement.
    weights: Vec<[f64; 2]>,
    /// Affine tail of the displacement interpolant itself.
    interp_affine: [[f64; 3]; 2],
}

fn rbf(r2: f64) -> f64 {
    // r^2 * ln(r); zero at r = 0.
    if r2 > 0.0 {
        0.5 * r2 * r2.ln()
    } else {
        0.0
    }
}

impl ThinPlateSplineWarp {
    /// Build a warp from control points, per-control-point displacements and
    /// an affine part. Solves the standard interpolation system so that
    /// `S(c_i) = A*[c_i;1] + d_i`.
    pub fn new(
        control_points: Vec<[f64; 2]>,
        displacements: Vec<[f64; 2]>,
        affine: [[f64; 3]; 2],
    ) -> Self {
        assert_eq!(control_points.len(), displacements.len());
        let n = control_points.len();
        let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
        for i in 0..n {
            for j in 0..n {
                let dx = control_points[i][0] - control_points[j][0];
                let dy = control_points[i][1] - control_points[j][1];
                a[(i, j)] = rbf(dx * dx + dy * dy);
            }
            a[(i, n)] = 1.0;
            a[(i, n + 1)] = control_points[i][0];
            a[(i, n + 2)] = control_points[i][1];
            a[(n, i)] = 1.0;
            a[(n + 1, i)] = control_points[i][0];
            a[(n + 2, i)] = control_points[i][1];
        }
        let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
        for i in 0..n {
            rhs[(i, 0)] = displacements[i][0];
            rhs[(i, 1)] = displacements[i][1];
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .expect("TPS system is nonsingular for distinct control points");
        let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
        let interp_affine = [
            [sol[(n + 1, 0)], sol[(n + 2, 0)], sol[(n, 0)]],
            [sol[(n + 1, 1)], sol[(n + 2, 1)], sol[(n, 1)]],
        ];
        Self {
            control_points,
            displacements,
            affine,
            weights,
            interp_affine,
        }
    }

    /// Identity-affine warp from random control displacements drawn uniformly
    /// in `[-magnitude, magnitude]^2`. Magnitude 0 is the identity warp.
    pub fn sample(rng_seed: u64, magnitude: f64, grid_size: usize) -> Self {
        assert!(magnitude >= 0.0, "magnitude must be nonnegative");
        assert!(grid_size >= 2, "control grid needs at least 2x2 points");
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut control = Vec::with_capacity(grid_size * grid_size);
        for gy in 0..grid_size {
            for gx in 0..grid_size {
                let x = -1.0 + 2.0 * gx as f64 / (grid_size - 1) as f64;
                let y = -1.0 + 2.0 * gy as f64 / (grid_size - 1) as f64;
                control.push([x, y]);
            }
        }
        let disp = (0..control.len())
            .map(|_| {
                [
                    rng.gen_range(-1.0..=1.0) * magnitude,
                    rng.gen_range(-1.0..=1.0) * magnitude,
                ]
            })
            .collect();
        Self::new(control, disp, Self::identity_affine())
    }

    pub fn identity_affine() -> [[f64; 3]; 2] {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control_points
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacements
    }

    /// The sampling map `S(q)`: where in the source the output pixel at `q`
    /// reads from.
    pub fn sample_source(&self, q: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0f64; 2];
        for axis in 0..2 {
            let a = &self.affine[axis];
            let ia = &self.interp_affine[axis];
            let mut v = a[0] * q[0] + a[1] * q[1] + a[2];
            v += ia[0] * q[0] + ia[1] * q[1] + ia[2];
            for (c, w) in self.control_points.iter().zip(&self.weights) {
                let dx = q[0] - c[0];
                let dy = q[1] - c[1];
                v += w[axis] * rbf(dx * dx + dy * dy);
            }
            out[axis] = v;
        }
        out
    }

    /// Where a *source* point ends up in the warped image: `S^-1(p)` by
    /// fixed-point iteration. Converges for the small, smooth warps used in
    /// pair synthesis.
    pub fn push_point(&self, p: [f64; 2], iterations: usize) -> [f64; 2] {
        let mut q = p;
        for _ in 0..iterations {
            let s = self.sample_source(q);
            q = [q[0] + (p[0] - s[0]), q[1] + (p[1] - s[1])];
        }
        q
    }

    /// Approximate inverse warp: a TPS fitted so that its sampling map undoes
    /// this one at the control points.
    pub fn numerical_inverse(&self, iterations: usize) -> Self {
        let disp = self
            .control_points
            .iter()
            .map(|&c| {
                let inv = self.push_point(c, iterations);
                [inv[0] - c[0], inv[1] - c[1]]
            })
            .collect();
        Self::new(self.control_points.clone(), disp, Self::identity_affine())
    }
}

/// Continuous pixel index of a normalized coordinate: `x = (2c+1)/n - 1`
/// inverted. Results within 1e-9 of an integer snap to it so that identity
/// warps resample pixel centers exactly.
fn to_pixel_index(x: f64, n: usize) -> f64 {
    let f = ((x + 1.0) * n as f64 - 1.0) / 2.0;
    let r = f.round();
    if (f - r).abs() < 1e-9 {
        r
    } else {
        f
    }
}

fn bilinear_at(image: ArrayView2<'_, f32>, row_f: f64, col_f: f64) -> f32 {
    let (h, w) = image.dim();
    let row_f = row_f.clamp(0.0, (h - 1) as f64);
    let col_f = col_f.clamp(0.0, (w - 1) as f64);
    let r0 = row_f.floor() as usize;
    let c0 = col_f.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = row_f - r0 as f64;
    let fc = col_f - c0 as f64;
    let v00 = image[[r0, c0]] as f64;
    let v01 = image[[r0, c1]] as f64;
    let v10 = image[[r1, c0]] as f64;
    let v11 = image[[r1, c1]] as f64;
    (v00 * (1.0 - fr) * (1.0 - fc) + v01 * (1.0 - fr) * fc + v10 * fr * (1.0 - fc) + v11 * fr * fc)
        as f32
}

/// Warp a `(C, H, W)` image by bilinear backward sampling; samples outside
/// the grid replicate the edge pixels.
pub fn tps_apply(warp: &ThinPlateSplineWarp, image: ArrayView3<'_, f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for row in 0..h {
        let uy = super::render::center_coord(row, h);
        for col in 0..w {
            let ux = super::render::center_coord(col, w);
            let s = warp.sample_source([ux, uy]);
            let col_f = to_pixel_index(s[0], w);
            let row_f = to_pixel_index(s[1], h);
            for ch in 0..c {
                out[[ch, row, col]] =
                    bilinear_at(image.index_axis(ndarray::Axis(0), ch), row_f, col_f);
            }
        }
    }
    out
}

/// Single-channel variant of [`tps_apply`].
pub fn tps_apply_gray(warp: &ThinPlateSplineWarp, image: ArrayView2<'_, f32>) -> Array2<f32> {
    let img3 = image.insert_axis(ndarray::Axis(0));
    let out = tps_apply(warp, img3.view());
    out.index_axis(ndarray::Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_pattern(h: usize, w: usize) -> Array3<f32> {
        let mut img = Array3::<f32>::zeros((3, h, w));
        for row in 0..h {
            for col in 0..w {
                img[[0, row, col]] = (row * w + col) as f32 / (h * w) as f32;
                img[[1, row, col]] = ((row as f32 / h as f32) * std::f32::consts::PI).sin();
                img[[2, row, col]] = if (row / 4 + col / 4) % 2 == 0 { 1.0 } else { 0.2 };
            }
        }
        img
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let warp = ThinPlateSplineWarp::sample(42, 0.0, 4);
        for q in [[-0.8, 0.3], [0.0, 0.0], [0.9, -0.9]] {
            let s = warp.sample_source(q);
            assert_abs_diff_eq!(s[0], q[0], epsilon = 1e-12);
            assert_abs_diff_eq!(s[1], q[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_apply_is_bit_exact() {
        let warp = ThinPlateSplineWarp::sample(1, 0.0, 4);
        let img = test_pattern(16, 16);
        let out = tps_apply(&warp, img.view());
        assert_eq!(img, out);
    }

    #[test]
    fn same_seed_same_warp() {
        let a = ThinPlateSplineWarp::sample(7, 0.1, 4);
        let b = ThinPlateSplineWarp::sample(7, 0.1, 4);
        assert_eq!(a, b);
        let c = ThinPlateSplineWarp::sample(8, 0.1, 4);
        assert_ne!(a.displacements(), c.displacements());
    }

    #[test]
    fn translation_shifts_by_one_pixel() {
        let w = 16usize;
        // Sampling map q -> q + 2/W reads one pixel to the right, so content
        // shifts left; the last column replicates the edge.
        let affine = [[1.0, 0.0, 2.0 / w as f64], [0.0, 1.0, 0.0]];
        let control = vec![[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];
        let warp = ThinPlateSplineWarp::new(control, vec![[0.0; 2]; 4], affine);
        let img = test_pattern(16, 16);
        let out = tps_apply(&warp, img.view());
        for ch in 0..3 {
            for row in 0..16 {
                for col in 0..15 {
                    assert_abs_diff_eq!(
                        out[[ch, row, col]],
                        img[[ch, row, col + 1]],
                        epsilon = 1e-6
                    );
                }
                assert_abs_diff_eq!(out[[ch, row, 15]], img[[ch, row, 15]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn interpolates_control_displacements_and_dense_grid_bound() {
        let warp = ThinPlateSplineWarp::sample(3, 0.1, 4);
        // The map must hit the sampled displacement at every control point.
        for (c, d) in warp.control_points().iter().zip(warp.displacements()) {
            let s = warp.sample_source(*c);
            assert_abs_diff_eq!(s[0] - c[0], d[0], epsilon = 1e-9);
            assert_abs_diff_eq!(s[1] - c[1], d[1], epsilon = 1e-9);
        }
        // Dense-grid oracle: the max displacement over the field bounds the
        // mean control-point displacement.
        let mean_ctrl: f64 = warp
            .displacements()
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .sum::<f64>()
            / warp.displacements().len() as f64;
        let mut dense_max = 0.0f64;
        let n = 200;
        for gy in 0..n {
            for gx in 0..n {
                let q = [
                    -1.0 + 2.0 * gx as f64 / (n - 1) as f64,
                    -1.0 + 2.0 * gy as f64 / (n - 1) as f64,
                ];
                let s = warp.sample_source(q);
                let d = ((s[0] - q[0]).powi(2) + (s[1] - q[1]).powi(2)).sqrt();
                dense_max = dense_max.max(d);
            }
        }
        assert!(mean_ctrl <= dense_max + 1e-12);
        // And the warped pattern actually differs from the source.
        let img = test_pattern(32, 32);
        let out = tps_apply(&warp, img.view());
        assert_ne!(img, out);
    }

    #[test]
    fn push_point_inverts_sampling_map() {
        let warp = ThinPlateSplineWarp::sample(9, 0.08, 4);
        for p in [[0.2, -0.3], [-0.6, 0.5], [0.0, 0.0]] {
            let q = warp.push_point(p, 30);
            let back = warp.sample_source(q);
            assert_abs_diff_eq!(back[0], p[0], epsilon = 1e-6);
            assert_abs_diff_eq!(back[1], p[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn round_trip_with_numerical_inverse() {
        // Smooth image: low-frequency gradients only.
        let mut img = Array3::<f32>::zeros((1, 48, 48));
        for row in 0..48 {
            for col in 0..48 {
                let x = col as f32 / 48.0;
                let y = row as f32 / 48.0;
                img[[0, row, col]] =
                    0.5 + 0.4 * (2.0 * std::f32::consts::PI * x).sin() * (y * 2.0).cos();
            }
        }
        let warp = ThinPlateSplineWarp::sample(11, 0.06, 4);
        let inv = warp.numerical_inverse(30);
        let there = tps_apply(&warp, img.view());
        let back = tps_apply(&inv, there.view());
        let mean_abs: f32 = img
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / img.len() as f32;
        assert!(mean_abs < 0.05, "round-trip mean abs error {mean_abs}");
    }
}
