//! Elementwise, structural and reduction operations.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn};

use super::{ArrD, Tape, Tensor};

impl Tape {
    fn unary<F, B>(&mut self, x: &Tensor, forward: F, backward: B) -> Tensor
    where
        F: FnOnce(&ArrD) -> ArrD,
        B: Fn(&ArrD, &ArrD, &ArrD) -> ArrD + 'static,
    {
        let out = Arc::new(forward(&x.data));
        let node = match x.node {
            Some(xn) if self.recording => {
                let xd = Arc::clone(&x.data);
                let od = Arc::clone(&out);
                self.push(Box::new(move |g, grads| {
                    grads.accumulate(xn, backward(g, &xd, &od));
                }))
            }
            _ => None,
        };
        Tensor { data: out, node }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = Arc::new(&*a.data + &*b.data);
        let node = if self.recording && (a.node.is_some() || b.node.is_some()) {
            let (an, bn) = (a.node, b.node);
            self.push(Box::new(move |g, grads| {
                if let Some(n) = an {
                    grads.accumulate(n, g.clone());
                }
                if let Some(n) = bn {
                    grads.accumulate(n, g.clone());
                }
            }))
        } else {
            None
        };
        Tensor { data: out, node }
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = Arc::new(&*a.data - &*b.data);
        let node = if self.recording && (a.node.is_some() || b.node.is_some()) {
            let (an, bn) = (a.node, b.node);
            self.push(Box::new(move |g, grads| {
                if let Some(n) = an {
                    grads.accumulate(n, g.clone());
                }
                if let Some(n) = bn {
                    grads.accumulate(n, g.mapv(|v| -v));
                }
            }))
        } else {
            None
        };
        Tensor { data: out, node }
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = Arc::new(&*a.data * &*b.data);
        let node = if self.recording && (a.node.is_some() || b.node.is_some()) {
            let (an, bn) = (a.node, b.node);
            let (ad, bd) = (Arc::clone(&a.data), Arc::clone(&b.data));
            self.push(Box::new(move |g, grads| {
                if let Some(n) = an {
                    grads.accumulate(n, g * &*bd);
                }
                if let Some(n) = bn {
                    grads.accumulate(n, g * &*ad);
                }
            }))
        } else {
            None
        };
        Tensor { data: out, node }
    }

    pub fn scale(&mut self, x: &Tensor, c: f32) -> Tensor {
        self.unary(x, |x| x.mapv(|v| v * c), move |g, _, _| g.mapv(|v| v * c))
    }

    pub fn square(&mut self, x: &Tensor) -> Tensor {
        self.unary(
            x,
            |x| x.mapv(|v| v * v),
            |g, x, _| g * &x.mapv(|v| 2.0 * v),
        )
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(
            x,
            |x| x.mapv(|v| v.max(0.0)),
            |g, x, _| {
                let mut out = g.clone();
                out.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                out
            },
        )
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f32) -> Tensor {
        self.unary(
            x,
            move |x| x.mapv(|v| if v > 0.0 { v } else { slope * v }),
            move |g, x, _| {
                let mut out = g.clone();
                out.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                });
                out
            },
        )
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(
            x,
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            |g, _, y| g * &y.mapv(|s| s * (1.0 - s)),
        )
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        self.unary(
            x,
            |x| x.mapv(f32::tanh),
            |g, _, y| g * &y.mapv(|t| 1.0 - t * t),
        )
    }

    /// Reshape preserving element count.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Tensor {
        let out = x
            .data
            .to_shape(IxDyn(shape))
            .expect("reshape element count mismatch")
            .to_owned();
        let in_shape: Vec<usize> = x.shape().to_vec();
        let node = match x.node {
            Some(xn) if self.recording => self.push(Box::new(move |g, grads| {
                let back = g
                    .to_shape(IxDyn(&in_shape))
                    .expect("reshape backward")
                    .to_owned();
                grads.accumulate(xn, back);
            })),
            _ => None,
        };
        Tensor {
            data: Arc::new(out),
            node,
        }
    }

    /// Concatenate along the channel axis of `(B, C, H, W)` tensors.
    pub fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert_eq!(sa.len(), 4, "concat_channels expects 4-d tensors");
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..]);
        let out = ndarray::concatenate(Axis(1), &[a.data.view(), b.data.view()])
            .expect("concat shapes verified")
            .as_standard_layout()
            .to_owned();
        let ca = sa[1];
        let node = if self.recording && (a.node.is_some() || b.node.is_some()) {
            let (an, bn) = (a.node, b.node);
            self.push(Box::new(move |g, grads| {
                if let Some(n) = an {
                    grads.accumulate(n, g.slice_axis(Axis(1), (0..ca).into()).to_owned());
                }
                if let Some(n) = bn {
                    grads.accumulate(
                        n,
                        g.slice_axis(Axis(1), (ca..g.shape()[1]).into()).to_owned(),
                    );
                }
            }))
        } else {
            None
        };
        Tensor {
            data: Arc::new(out),
            node,
        }
    }

    /// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
    pub fn upsample_nearest2(&mut self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xin = x
            .data
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let mut out = ndarray::Array4::<f32>::zeros((b, c, h * 2, w * 2));
        for bi in 0..b {
            for ci in 0..c {
                for row in 0..h {
                    for col in 0..w {
                        let v = xin[[bi, ci, row, col]];
                        out[[bi, ci, 2 * row, 2 * col]] = v;
                        out[[bi, ci, 2 * row, 2 * col + 1]] = v;
                        out[[bi, ci, 2 * row + 1, 2 * col]] = v;
                        out[[bi, ci, 2 * row + 1, 2 * col + 1]] = v;
                    }
                }
            }
        }
        let node = match x.node {
            Some(xn) if self.recording => self.push(Box::new(move |g, grads| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = ndarray::Array4::<f32>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for row in 0..h {
                            for col in 0..w {
                                gx[[bi, ci, row, col]] = g4[[bi, ci, 2 * row, 2 * col]]
                                    + g4[[bi, ci, 2 * row, 2 * col + 1]]
                                    + g4[[bi, ci, 2 * row + 1, 2 * col]]
                                    + g4[[bi, ci, 2 * row + 1, 2 * col + 1]];
                            }
                        }
                    }
                }
                grads.accumulate(xn, gx.into_dyn());
            })),
            _ => None,
        };
        Tensor {
            data: Arc::new(out.into_dyn()),
            node,
        }
    }

    /// 2x2 average pooling of `(B, C, H, W)` with even H, W.
    pub fn avg_pool2(&mut self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
        let xin = x
            .data
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let mut out = ndarray::Array4::<f32>::zeros((b, c, h / 2, w / 2));
        for bi in 0..b {
            for ci in 0..c {
                for row in 0..h / 2 {
                    for col in 0..w / 2 {
                        out[[bi, ci, row, col]] = 0.25
                            * (xin[[bi, ci, 2 * row, 2 * col]]
                                + xin[[bi, ci, 2 * row, 2 * col + 1]]
                                + xin[[bi, ci, 2 * row + 1, 2 * col]]
                                + xin[[bi, ci, 2 * row + 1, 2 * col + 1]]);
                    }
                }
            }
        }
        let node = match x.node {
            Some(xn) if self.recording => self.push(Box::new(move |g, grads| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx = ndarray::Array4::<f32>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for row in 0..h / 2 {
                            for col in 0..w / 2 {
                                let gv = 0.25 * g4[[bi, ci, row, col]];
                                gx[[bi, ci, 2 * row, 2 * col]] = gv;
                                gx[[bi, ci, 2 * row, 2 * col + 1]] = gv;
                                gx[[bi, ci, 2 * row + 1, 2 * col]] = gv;
                                gx[[bi, ci, 2 * row + 1, 2 * col + 1]] = gv;
                            }
                        }
                    }
                }
                grads.accumulate(xn, gx.into_dyn());
            })),
            _ => None,
        };
        Tensor {
            data: Arc::new(out.into_dyn()),
            node,
        }
    }

    /// Mean over every element, yielding a 0-d scalar tensor. Accumulates in
    /// f64 for stable, order-independent magnitudes.
    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = x.data.len();
        let mean = x.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), mean as f32);
        let shape: Vec<usize> = x.shape().to_vec();
        let node = match x.node {
            Some(xn) if self.recording => self.push(Box::new(move |g, grads| {
                let gv = g.iter().next().copied().unwrap_or(1.0) / n as f32;
                grads.accumulate(xn, ArrayD::from_elem(IxDyn(&shape), gv));
            })),
            _ => None,
        };
        Tensor {
            data: Arc::new(out),
            node,
        }
    }

    /// Sum of squares over all non-batch axes: `(B, ...) -> (B,)`.
    pub fn sum_sq_per_sample(&mut self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let per = x.data.len() / b;
        let flat = x.data.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let s: f64 = flat[bi * per..(bi + 1) * per]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum();
            out.push(s as f32);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b]), out).unwrap();
        let shape: Vec<usize> = x.shape().to_vec();
        let node = match x.node {
            Some(xn) if self.recording => {
                let xd = Arc::clone(&x.data);
                self.push(Box::new(move |g, grads| {
                    let gs = g.as_slice().expect("contiguous");
                    let xs = xd.as_slice().expect("contiguous");
                    let mut gx = Vec::with_capacity(xs.len());
                    for bi in 0..b {
                        let gb = gs[bi];
                        for &xv in &xs[bi * per..(bi + 1) * per] {
                            gx.push(2.0 * xv * gb);
                        }
                    }
                    grads.accumulate(xn, ArrayD::from_shape_vec(IxDyn(&shape), gx).unwrap());
                }))
            }
            _ => None,
        };
        Tensor {
            data: Arc::new(out),
            node,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::check_gradient;
    use crate::tensor::Param;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_param(name: &str, shape: &[usize], seed: u64) -> Param {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Param::new(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut p = rand_param("x", &[3, 4], 1);
        check_gradient(
            &mut p,
            |tape, x| {
                let s = tape.sigmoid(x);
                let t = tape.tanh(&s);
                let r = tape.leaky_relu(&t, 0.2);
                let q = tape.square(&r);
                tape.mean_all(&q)
            },
            8,
            1e-2,
        );
    }

    #[test]
    fn binary_op_gradients() {
        let mut p = rand_param("x", &[6], 2);
        check_gradient(
            &mut p,
            |tape, x| {
                let two = tape.scale(x, 2.0);
                let prod = tape.mul(x, &two);
                let diff = tape.sub(&prod, x);
                let sum = tape.add(&diff, x);
                tape.mean_all(&sum)
            },
            6,
            1e-2,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut p = rand_param("x", &[2, 3, 4, 4], 3);
        check_gradient(
            &mut p,
            |tape, x| {
                let up = tape.upsample_nearest2(x);
                let down = tape.avg_pool2(&up);
                let cat = tape.concat_channels(&down, x);
                let sq = tape.sum_sq_per_sample(&cat);
                let flat = tape.reshape(&sq, &[2, 1]);
                tape.mean_all(&flat)
            },
            10,
            1e-2,
        );
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |ix| {
            (ix[2] * 4 + ix[3]) as f32
        }));
        let up = tape.upsample_nearest2(&x);
        let down = tape.avg_pool2(&up);
        assert_eq!(&*down.data, &*x.data);
    }

    #[test]
    fn sum_sq_per_sample_values() {
        let mut tape = Tape::new();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let s = tape.sum_sq_per_sample(&x);
        assert_eq!(s.data.as_slice().unwrap(), &[5.0, 25.0]);
    }
}
