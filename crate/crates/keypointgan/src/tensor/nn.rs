//! Convolution, normalization and fully-connected layers.
//!
//! Convolutions run as im2col + GEMM. The backward pass rebuilds the column
//! matrix from the saved input instead of caching it, trading a little time
//! for a much smaller peak footprint.

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, ArrayView4, Axis, IxDyn};

use super::{Tape, Tensor};

fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

/// Column matrix of shape `(Cin * KH * KW, Hout * Wout)` for one sample.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f32> {
    let hout = conv_out_extent(h, kh, stride, pad);
    let wout = conv_out_extent(w, kw, stride, pad);
    let l = hout * wout;
    let mut cols = Array2::<f32>::zeros((cin * kh * kw, l));
    let cols_s = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * l;
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols_s[base + oy * wout..base + (oy + 1) * wout];
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column-matrix gradient back onto the input plane.
#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    dcols: &Array2<f32>,
    dx: &mut [f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let hout = conv_out_extent(h, kh, stride, pad);
    let wout = conv_out_extent(w, kw, stride, pad);
    let l = hout * wout;
    let dcols_s = dcols.as_slice().unwrap();
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * l;
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &dcols_s[base + oy * wout..base + (oy + 1) * wout];
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-d convolution: `x (B,Cin,H,W)`, `w (Cout,Cin,KH,KW)`, `b (Cout)`.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-d");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(b.shape(), &[cout], "conv2d bias shape");
        let hout = conv_out_extent(h, kh, stride, pad);
        let wout = conv_out_extent(wd, kw, stride, pad);
        let l = hout * wout;

        let w_mat = w
            .data
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let x_flat = x.data.as_slice().expect("contiguous input");
        let bias = b.data.as_slice().unwrap();
        let mut out = Array4::<f32>::zeros((batch, cout, hout, wout));
        {
            let out_s = out.as_slice_mut().unwrap();
            for bi in 0..batch {
                let cols = im2col(
                    &x_flat[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                );
                let prod = w_mat.dot(&cols); // (Cout, L)
                let prod_s = prod.as_slice().unwrap();
                let dst = &mut out_s[bi * cout * l..(bi + 1) * cout * l];
                for co in 0..cout {
                    let bv = bias[co];
                    for (d, s) in dst[co * l..(co + 1) * l]
                        .iter_mut()
                        .zip(&prod_s[co * l..(co + 1) * l])
                    {
                        *d = s + bv;
                    }
                }
            }
        }

        let node = if self.recording && (x.node.is_some() || w.node.is_some() || b.node.is_some())
        {
            let (xn, wn, bn) = (x.node, w.node, b.node);
            let xd = Arc::clone(&x.data);
            self.push(Box::new(move |g, grads| {
                let g_flat = g.as_slice().expect("contiguous grad");
                let x_flat = xd.as_slice().unwrap();
                let mut dw = Array2::<f32>::zeros((cout, cin * kh * kw));
                let mut dx =
                    if xn.is_some() { vec![0.0f32; batch * cin * h * wd] } else { Vec::new() };
                let w_t = w_mat.t();
                for bi in 0..batch {
                    let g_mat = ndarray::ArrayView2::from_shape(
                        (cout, l),
                        &g_flat[bi * cout * l..(bi + 1) * cout * l],
                    )
                    .unwrap();
                    if wn.is_some() {
                        let cols = im2col(
                            &x_flat[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                        );
                        dw += &g_mat.dot(&cols.t());
                    }
                    if xn.is_some() {
                        let dcols = w_t.dot(&g_mat);
                        col2im_accumulate(
                            &dcols,
                            &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                        );
                    }
                }
                if let Some(n) = wn {
                    grads.accumulate(
                        n,
                        dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                            .unwrap(),
                    );
                }
                if let Some(n) = bn {
                    let mut db = vec![0.0f32; cout];
                    for bi in 0..batch {
                        for co in 0..cout {
                            let seg = &g_flat[(bi * cout + co) * l..(bi * cout + co + 1) * l];
                            db[co] += seg.iter().sum::<f32>();
                        }
                    }
                    grads.accumulate(n, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
                }
                if let Some(n) = xn {
                    grads.accumulate(
                        n,
                        ArrayD::from_shape_vec(IxDyn(&[batch, cin, h, wd]), dx).unwrap(),
                    );
                }
            }))
        } else {
            None
        };
        Tensor {
            data: Arc::new(out.into_dyn()),
            node,
        }
    }

    /// Instance normalization over the spatial axes of `(B, C, H, W)` with a
    /// learned per-channel gain and bias.
    pub fn instance_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
        const EPS: f64 = 1e-5;
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(gain.shape(), &[c]);
        assert_eq!(bias.shape(), &[c]);
        let n = h * w;
        let xs = x.data.as_slice().unwrap();
        let gv = gain.data.as_slice().unwrap();
        let bv = bias.data.as_slice().unwrap();
        let mut out = vec![0.0f32; xs.len()];
        let mut mu = vec![0.0f32; b * c];
        let mut ivstd = vec![0.0f32; b * c];
        for bc in 0..b * c {
            let seg = &xs[bc * n..(bc + 1) * n];
            let m = seg.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = seg
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let iv = 1.0 / (var + EPS).sqrt();
            mu[bc] = m as f32;
            ivstd[bc] = iv as f32;
            let ci = bc % c;
            let (gc, bc_v) = (gv[ci], bv[ci]);
            for (o, &v) in out[bc * n..(bc + 1) * n].iter_mut().zip(seg) {
                *o = (v - m as f32) * iv as f32 * gc + bc_v;
            }
        }
        let node = if self.recording
            && (x.node.is_some() || gain.node.is_some() || bias.node.is_some())
        {
            let (xn, gn, bn) = (x.node, gain.node, bias.node);
            let xd = Arc::clone(&x.data);
            let gaind = Arc::clone(&gain.data);
            self.push(Box::new(move |g, grads| {
                let gs = g.as_slice().unwrap();
                let xs = xd.as_slice().unwrap();
                let gv = gaind.as_slice().unwrap();
                let mut dx = if xn.is_some() { vec![0.0f32; xs.len()] } else { Vec::new() };
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                for bc in 0..b * c {
                    let ci = bc % c;
                    let seg_x = &xs[bc * n..(bc + 1) * n];
                    let seg_g = &gs[bc * n..(bc + 1) * n];
                    let (m, iv) = (mu[bc], ivstd[bc]);
                    let mut sum_g = 0.0f64;
                    let mut sum_gxhat = 0.0f64;
                    for (&gi, &xi) in seg_g.iter().zip(seg_x) {
                        let xhat = ((xi - m) * iv) as f64;
                        sum_g += gi as f64;
                        sum_gxhat += gi as f64 * xhat;
                    }
                    dgain[ci] += sum_gxhat;
                    dbias[ci] += sum_g;
                    if xn.is_some() {
                        let gc = gv[ci] as f64;
                        let mean_dxhat = gc * sum_g / n as f64;
                        let mean_dxhat_xhat = gc * sum_gxhat / n as f64;
                        let seg_dx = &mut dx[bc * n..(bc + 1) * n];
                        for i in 0..n {
                            let xhat = ((seg_x[i] - m) * iv) as f64;
                            let dxhat = gc * seg_g[i] as f64;
                            seg_dx[i] = (iv as f64
                                * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))
                                as f32;
                        }
                    }
                }
                if let Some(nid) = xn {
                    grads.accumulate(
                        nid,
                        ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap(),
                    );
                }
                if let Some(nid) = gn {
                    grads.accumulate(
                        nid,
                        ArrayD::from_shape_vec(
                            IxDyn(&[c]),
                            dgain.iter().map(|&v| v as f32).collect(),
                        )
                        .unwrap(),
                    );
                }
                if let Some(nid) = bn {
                    grads.accumulate(
                        nid,
                        ArrayD::from_shape_vec(
                            IxDyn(&[c]),
                            dbias.iter().map(|&v| v as f32).collect(),
                        )
                        .unwrap(),
                    );
                }
            }))
        } else {
            None
        };
        Tensor {
            data: Arc::new(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()),
            node,
        }
    }

    /// Fully connected layer: `x (B,F)`, `w (Out,F)`, `b (Out)`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (batch, feat, out_f) = (xs[0], xs[1], ws[0]);
        assert_eq!(b.shape(), &[out_f]);
        let x2 = x
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let w2 = w
            .data
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = x2.dot(&w2.t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, &bb) in row.iter_mut().zip(b.data.iter()) {
                *v += bb;
            }
        }
        let node = if self.recording && (x.node.is_some() || w.node.is_some() || b.node.is_some())
        {
            let (xn, wn, bn) = (x.node, w.node, b.node);
            let xd = Arc::clone(&x.data);
            let wd = Arc::clone(&w.data);
            self.push(Box::new(move |g, grads| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if let Some(n) = xn {
                    let w2 = wd.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    grads.accumulate(n, g2.dot(&w2).into_dyn());
                }
                if let Some(n) = wn {
                    let x2 = xd.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    grads.accumulate(n, g2.t().dot(&x2).into_dyn());
                }
                if let Some(n) = bn {
                    let db = g2.sum_axis(Axis(0));
                    grads.accumulate(n, db.into_dyn());
                }
                let _ = (batch, feat);
            }))
        } else {
            None
        };
        Tensor {
            data: Arc::new(out.into_dyn()),
            node,
        }
    }
}

/// Direct (non-GEMM) convolution used as a correctness oracle in tests.
#[cfg(test)]
pub fn conv2d_reference(
    x: ArrayView4<'_, f32>,
    w: ArrayView4<'_, f32>,
    b: &[f32],
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (batch, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let hout = conv_out_extent(h, kh, stride, pad);
    let wout = conv_out_extent(wd, kw, stride, pad);
    let mut out = Array4::<f32>::zeros((batch, cout, hout, wout));
    for bi in 0..batch {
        for co in 0..cout {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut acc = b[co] as f64;
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += (x[[bi, ci, iy as usize, ix as usize]]
                                        * w[[co, ci, ki, kj]])
                                        as f64;
                                }
                            }
                        }
                    }
                    out[[bi, co, oy, ox]] = acc as f32;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::check_gradient;
    use crate::tensor::Param;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_forward_matches_reference() {
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            let x = rand_arr(&[2, 3, 8, 8], 1);
            let w = rand_arr(&[4, 3, 3, 3], 2);
            let b = rand_arr(&[4], 3);
            let mut tape = Tape::inference();
            let xt = tape.constant(x.clone());
            let wt = tape.constant(w.clone());
            let bt = tape.constant(b.clone());
            let out = tape.conv2d(&xt, &wt, &bt, stride, pad);
            let reference = conv2d_reference(
                x.view().into_dimensionality().unwrap(),
                w.view().into_dimensionality().unwrap(),
                b.as_slice().unwrap(),
                stride,
                pad,
            );
            let got = out
                .data
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .to_owned();
            let max_err = reference
                .iter()
                .zip(got.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-4, "stride {stride} pad {pad}: {max_err}");
        }
    }

    #[test]
    fn conv_weight_gradient() {
        let x = rand_arr(&[2, 2, 6, 6], 4);
        let mut w = Param::new("w", rand_arr(&[3, 2, 3, 3], 5));
        let b = rand_arr(&[3], 6);
        check_gradient(
            &mut w,
            |tape, wt| {
                let xt = tape.constant(x.clone());
                let bt = tape.constant(b.clone());
                let y = tape.conv2d(&xt, wt, &bt, 1, 1);
                let sq = tape.square(&y);
                tape.mean_all(&sq)
            },
            10,
            1e-2,
        );
    }

    #[test]
    fn conv_input_and_bias_gradient() {
        let w = rand_arr(&[3, 2, 3, 3], 7);
        let mut x = Param::new("x", rand_arr(&[1, 2, 6, 6], 8));
        check_gradient(
            &mut x,
            |tape, xt| {
                let wt = tape.constant(w.clone());
                let bt = tape.constant(rand_arr(&[3], 9));
                let y = tape.conv2d(xt, &wt, &bt, 2, 1);
                let sq = tape.square(&y);
                tape.mean_all(&sq)
            },
            10,
            1e-2,
        );
        let mut b = Param::new("b", rand_arr(&[3], 10));
        let x2 = rand_arr(&[1, 2, 6, 6], 11);
        check_gradient(
            &mut b,
            |tape, bt| {
                let wt = tape.constant(w.clone());
                let xt = tape.constant(x2.clone());
                let y = tape.conv2d(&xt, &wt, bt, 1, 1);
                let sq = tape.square(&y);
                tape.mean_all(&sq)
            },
            3,
            1e-2,
        );
    }

    #[test]
    fn instance_norm_statistics() {
        let x = rand_arr(&[2, 3, 8, 8], 12);
        let mut tape = Tape::inference();
        let xt = tape.constant(x);
        let g = tape.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0f32));
        let b = tape.constant(ArrayD::from_elem(IxDyn(&[3]), 0.0f32));
        let y = tape.instance_norm(&xt, &g, &b);
        let y4 = y.data.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for bi in 0..2 {
            for ci in 0..3 {
                let plane = y4.slice(ndarray::s![bi, ci, .., ..]);
                let mean: f32 = plane.iter().sum::<f32>() / 64.0;
                let var: f32 = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 64.0;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn instance_norm_gradients() {
        // A spatial mask breaks the normalization invariance of plain
        // mean-square losses, so the input gradient is non-degenerate.
        let mask = rand_arr(&[2, 2, 4, 4], 99);
        let mut x = Param::new("x", rand_arr(&[2, 2, 4, 4], 13));
        let gain = rand_arr(&[2], 14);
        let bias = rand_arr(&[2], 15);
        check_gradient(
            &mut x,
            |tape, xt| {
                let g = tape.constant(gain.clone());
                let b = tape.constant(bias.clone());
                let y = tape.instance_norm(xt, &g, &b);
                let m = tape.constant(mask.clone());
                let ym = tape.mul(&y, &m);
                let sq = tape.square(&ym);
                tape.mean_all(&sq)
            },
            10,
            2e-2,
        );
        let x2 = rand_arr(&[2, 2, 4, 4], 16);
        let mut gp = Param::new("gain", rand_arr(&[2], 17));
        check_gradient(
            &mut gp,
            |tape, g| {
                let xt = tape.constant(x2.clone());
                let b = tape.constant(bias.clone());
                let y = tape.instance_norm(&xt, g, &b);
                let sq = tape.square(&y);
                tape.mean_all(&sq)
            },
            2,
            1e-2,
        );
    }

    #[test]
    fn linear_gradients() {
        let x = rand_arr(&[4, 6], 18);
        let mut w = Param::new("w", rand_arr(&[3, 6], 19));
        check_gradient(
            &mut w,
            |tape, wt| {
                let xt = tape.constant(x.clone());
                let bt = tape.constant(rand_arr(&[3], 20));
                let y = tape.linear(&xt, wt, &bt);
                let sq = tape.square(&y);
                tape.mean_all(&sq)
            },
            10,
            1e-2,
        );
    }
}
