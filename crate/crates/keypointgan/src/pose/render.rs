use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::pose::{EdgeSet, KeypointSet, SkeletonImage};

/// Distance from point `u` to the segment `[a, b]`, minimizing
/// `||u - (r*a + (1-r)*b)||` over `r` in `[0, 1]`.
///
/// A degenerate segment (`a == b`) reduces to the point distance.
pub fn point_segment_distance(u: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (_, d2) = segment_argmin(u, a, b);
    d2.sqrt()
}

/// Returns `(r*, d^2)` for the closest point `r*a + (1-r*)b` on the segment.
#[inline]
fn segment_argmin(u: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let e = [a[0] - b[0], a[1] - b[1]];
    let w = [u[0] - b[0], u[1] - b[1]];
    let ee = e[0] * e[0] + e[1] * e[1];
    let r = if ee > 0.0 {
        ((w[0] * e[0] + w[1] * e[1]) / ee).clamp(0.0, 1.0)
    } else {
        0.5
    };
    let dx = w[0] - r * e[0];
    let dy = w[1] - r * e[1];
    (r, dx * dx + dy * dy)
}

/// Normalized coordinate of a pixel center: column `c` of `n` maps to
/// `(2c + 1)/n - 1`.
#[inline]
pub(crate) fn center_coord(index: usize, extent: usize) -> f64 {
    (2.0 * index as f64 + 1.0) / extent as f64 - 1.0
}

/// Render keypoints as a skeleton image: pixel value `exp(-gamma * d(u)^2)`
/// where `d(u)` is the distance from the pixel center to the nearest edge
/// segment, all in normalized coordinates.
pub fn render_skeleton(
    keypoints: &KeypointSet,
    edges: &EdgeSet,
    resolution: (usize, usize),
    gamma: f64,
) -> Result<SkeletonImage> {
    validate_render_inputs(keypoints, edges, gamma)?;
    let (h, w) = resolution;
    let mut pixels = vec![0.0f64; h * w];
    let coords = keypoints.coords();
    for row in 0..h {
        let uy = center_coord(row, h);
        for col in 0..w {
            let ux = center_coord(col, w);
            let mut best = f64::INFINITY;
            for &(i, j) in edges.edges() {
                let (_, d2) = segment_argmin([ux, uy], coords[i], coords[j]);
                if d2 < best {
                    best = d2;
                }
            }
            pixels[row * w + col] = (-gamma * best).exp();
        }
    }
    Ok(SkeletonImage::from_raw(pixels, h, w))
}

/// Per-pixel partial derivatives of [`render_skeleton`] with respect to each
/// keypoint coordinate. Output dims: `[K, 2, H, W]` with axis 1 = (x, y).
///
/// At a pixel whose minimizer is not unique the derivative follows the first
/// minimizing edge in enumeration order.
pub fn render_skeleton_gradient(
    keypoints: &KeypointSet,
    edges: &EdgeSet,
    resolution: (usize, usize),
    gamma: f64,
) -> Result<Array4<f64>> {
    validate_render_inputs(keypoints, edges, gamma)?;
    let (h, w) = resolution;
    let k = keypoints.len();
    let coords = keypoints.coords();
    let mut grad = Array4::<f64>::zeros((k, 2, h, w));
    for row in 0..h {
        let uy = center_coord(row, h);
        for col in 0..w {
            let ux = center_coord(col, w);
            let mut best = f64::INFINITY;
            let mut best_edge = 0usize;
            let mut best_r = 0.0f64;
            for (ei, &(i, j)) in edges.edges().iter().enumerate() {
                let (r, d2) = segment_argmin([ux, uy], coords[i], coords[j]);
                if d2 < best {
                    best = d2;
                    best_edge = ei;
                    best_r = r;
                }
            }
            let val = (-gamma * best).exp();
            if val == 0.0 {
                continue;
            }
            let (i, j) = edges.edges()[best_edge];
            let (pi, pj) = (coords[i], coords[j]);
            let mx = best_r * pi[0] + (1.0 - best_r) * pj[0];
            let my = best_r * pi[1] + (1.0 - best_r) * pj[1];
            let dvec = [ux - mx, uy - my];
            // d(exp(-g*d2))/dp_i = 2*g*r*val * dvec, and (1-r) for p_j.
            let ci = 2.0 * gamma * best_r * val;
            let cj = 2.0 * gamma * (1.0 - best_r) * val;
            grad[[i, 0, row, col]] += ci * dvec[0];
            grad[[i, 1, row, col]] += ci * dvec[1];
            grad[[j, 0, row, col]] += cj * dvec[0];
            grad[[j, 1, row, col]] += cj * dvec[1];
        }
    }
    Ok(grad)
}

fn validate_render_inputs(keypoints: &KeypointSet, edges: &EdgeSet, gamma: f64) -> Result<()> {
    if edges.edges().is_empty() {
        return Err(Error::Topology(
            "render_skeleton requires a non-empty edge set".into(),
        ));
    }
    if edges.num_keypoints() != keypoints.len() {
        return Err(Error::Shape(format!(
            "edge set expects K={} but got {} keypoints",
            edges.num_keypoints(),
            keypoints.len()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// Per-pixel minimizer record kept by the batch renderer so the backward
/// pass can route gradients without re-running the edge search.
pub struct RenderTrace {
    pub edge: Vec<u16>,
    pub r: Vec<f32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

/// Batch renderer over `(B, K, 2)` f32 coordinates, producing `(B, 1, H, W)`
/// pixels (flattened to `(B, H, W)` here; the tensor layer adds the channel
/// axis). Geometry runs in f64 and is truncated to f32 at the end.
pub fn render_skeleton_batch(
    coords: ArrayView3<'_, f32>,
    edges: &EdgeSet,
    resolution: (usize, usize),
    gamma: f64,
) -> Result<(Array3<f32>, RenderTrace)> {
    let (b, k, two) = coords.dim();
    if two != 2 || k != edges.num_keypoints() {
        return Err(Error::Shape(format!(
            "expected coords of shape (B, {}, 2), got ({b}, {k}, {two})",
            edges.num_keypoints()
        )));
    }
    if edges.edges().is_empty() {
        return Err(Error::Topology(
            "render_skeleton requires a non-empty edge set".into(),
        ));
    }
    let (h, w) = resolution;
    let mut out = Array3::<f32>::zeros((b, h, w));
    let mut trace = RenderTrace {
        edge: vec![0; b * h * w],
        r: vec![0.0; b * h * w],
        batch: b,
        height: h,
        width: w,
    };
    let edge_list = edges.edges();
    for bi in 0..b {
        let mut pts = Vec::with_capacity(k);
        for ki in 0..k {
            pts.push([coords[[bi, ki, 0]] as f64, coords[[bi, ki, 1]] as f64]);
        }
        for row in 0..h {
            let uy = center_coord(row, h);
            for col in 0..w {
                let ux = center_coord(col, w);
                let mut best = f64::INFINITY;
                let mut best_edge = 0usize;
                let mut best_r = 0.0f64;
                for (ei, &(i, j)) in edge_list.iter().enumerate() {
                    let (r, d2) = segment_argmin([ux, uy], pts[i], pts[j]);
                    if d2 < best {
                        best = d2;
                        best_edge = ei;
                        best_r = r;
                    }
                }
                out[[bi, row, col]] = (-gamma * best).exp() as f32;
                let idx = (bi * h + row) * w + col;
                trace.edge[idx] = best_edge as u16;
                trace.r[idx] = best_r as f32;
            }
        }
    }
    Ok((out, trace))
}

/// Backward pass matching [`render_skeleton_batch`]: given upstream pixel
/// gradients `(B, H, W)`, accumulate gradients into `(B, K, 2)` coordinates.
pub fn render_skeleton_batch_backward(
    grad_out: ArrayView3<'_, f32>,
    coords: ArrayView3<'_, f32>,
    values: ArrayView3<'_, f32>,
    trace: &RenderTrace,
    edges: &EdgeSet,
    gamma: f64,
) -> Array3<f32> {
    let (b, k, _) = coords.dim();
    let (h, w) = (trace.height, trace.width);
    let mut grad = Array3::<f32>::zeros((b, k, 2));
    let edge_list = edges.edges();
    for bi in 0..b {
        for row in 0..h {
            let uy = center_coord(row, h);
            for col in 0..w {
                let g = grad_out[[bi, row, col]] as f64;
                let val = values[[bi, row, col]] as f64;
                if g == 0.0 || val == 0.0 {
                    continue;
                }
                let idx = (bi * h + row) * w + col;
                let (i, j) = edge_list[trace.edge[idx] as usize];
                let r = trace.r[idx] as f64;
                let ux = center_coord(col, w);
                let pix = [coords[[bi, i, 0]] as f64, coords[[bi, i, 1]] as f64];
                let pjx = [coords[[bi, j, 0]] as f64, coords[[bi, j, 1]] as f64];
                let mx = r * pix[0] + (1.0 - r) * pjx[0];
                let my = r * pix[1] + (1.0 - r) * pjx[1];
                let dvec = [ux - mx, uy - my];
                let ci = g * 2.0 * gamma * r * val;
                let cj = g * 2.0 * gamma * (1.0 - r) * val;
                grad[[bi, i, 0]] += (ci * dvec[0]) as f32;
                grad[[bi, i, 1]] += (ci * dvec[1]) as f32;
                grad[[bi, j, 0]] += (cj * dvec[0]) as f32;
                grad[[bi, j, 1]] += (cj * dvec[1]) as f32;
            }
        }
    }
    grad
}
