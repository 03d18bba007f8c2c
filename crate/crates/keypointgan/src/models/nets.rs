//! Network building blocks and the four convolutional networks.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Param, Tape, Tensor};

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller; good enough for initialization and fully deterministic.
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel);
        Self {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv2d(x, &w, &b, self.stride, self.pad)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct InstanceNorm {
    pub gain: Param,
    pub bias: Param,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[channels]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.instance_norm(x, &g, &b)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

struct NormConv {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl NormConv {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(name, cin, cout, 3, stride, rng),
            norm: InstanceNorm::new(&format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, slope: f32) -> Tensor {
        let y = self.conv.forward(tape, x);
        let y = self.norm.forward(tape, &y);
        tape.leaky_relu(&y, slope)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Encoder-decoder image translation network with skip connections and a
/// sigmoid output head. Input and output stay at the same resolution.
pub struct UNet {
    enc0: NormConv,
    enc1: NormConv,
    enc2: NormConv,
    mid: NormConv,
    dec2: NormConv,
    dec1: NormConv,
    out: Conv2d,
}

impl UNet {
    pub fn new(name: &str, cin: usize, cout: usize, nf: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            enc0: NormConv::new(&format!("{name}.enc0"), cin, nf, 1, rng),
            enc1: NormConv::new(&format!("{name}.enc1"), nf, 2 * nf, 2, rng),
            enc2: NormConv::new(&format!("{name}.enc2"), 2 * nf, 4 * nf, 2, rng),
            mid: NormConv::new(&format!("{name}.mid"), 4 * nf, 4 * nf, 1, rng),
            dec2: NormConv::new(&format!("{name}.dec2"), 6 * nf, 2 * nf, 1, rng),
            dec1: NormConv::new(&format!("{name}.dec1"), 3 * nf, nf, 1, rng),
            out: Conv2d::new(&format!("{name}.out"), nf, cout, 3, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let e0 = self.enc0.forward(tape, x, 0.2);
        let e1 = self.enc1.forward(tape, &e0, 0.2);
        let e2 = self.enc2.forward(tape, &e1, 0.2);
        let m = self.mid.forward(tape, &e2, 0.2);
        let up2 = tape.upsample_nearest2(&m);
        let cat2 = tape.concat_channels(&up2, &e1);
        let d2 = self.dec2.forward(tape, &cat2, 0.0);
        let up1 = tape.upsample_nearest2(&d2);
        let cat1 = tape.concat_channels(&up1, &e0);
        let d1 = self.dec1.forward(tape, &cat1, 0.0);
        let logits = self.out.forward(tape, &d1);
        tape.sigmoid(&logits)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for blk in [&self.enc0, &self.enc1, &self.enc2, &self.mid, &self.dec2, &self.dec1] {
            p.extend(blk.params());
        }
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for blk in [
            &mut self.enc0,
            &mut self.enc1,
            &mut self.enc2,
            &mut self.mid,
            &mut self.dec2,
            &mut self.dec1,
        ] {
            p.extend(blk.params_mut());
        }
        p.extend(self.out.params_mut());
        p
    }
}

/// Skeleton-image-to-heatmaps regressor; heatmaps live at half resolution
/// and feed the spatial-softmax readout.
pub struct EtaNet {
    c0: NormConv,
    c1: NormConv,
    c2: NormConv,
    head: Conv2d,
}

impl EtaNet {
    pub fn new(name: &str, num_keypoints: usize, nf: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c0: NormConv::new(&format!("{name}.c0"), 1, nf, 1, rng),
            c1: NormConv::new(&format!("{name}.c1"), nf, 2 * nf, 2, rng),
            c2: NormConv::new(&format!("{name}.c2"), 2 * nf, 2 * nf, 1, rng),
            head: Conv2d::new(&format!("{name}.head"), 2 * nf, num_keypoints, 3, 1, rng),
        }
    }

    /// `(B, 1, H, W)` skeleton image to `(B, K, H/2, W/2)` heatmaps.
    pub fn heatmaps(&self, tape: &mut Tape, y: &Tensor) -> Tensor {
        let h0 = self.c0.forward(tape, y, 0.2);
        let h1 = self.c1.forward(tape, &h0, 0.2);
        let h2 = self.c2.forward(tape, &h1, 0.2);
        self.head.forward(tape, &h2)
    }

    /// Full readout: heatmaps then spatial-softmax expectation, `(B, K, 2)`.
    pub fn forward(&self, tape: &mut Tape, y: &Tensor) -> Tensor {
        let maps = self.heatmaps(tape, y);
        tape.softmax_coords(&maps)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for blk in [&self.c0, &self.c1, &self.c2] {
            p.extend(blk.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for blk in [&mut self.c0, &mut self.c1, &mut self.c2] {
            p.extend(blk.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    /// Deep copy under new parameter names (used for the frozen snapshot).
    pub fn clone_renamed(&self, prefix: &str) -> Self {
        let rename = |p: &Param, tail: &str| {
            Param::new(format!("{prefix}{tail}"), (*p.value).clone())
        };
        let clone_nc = |nc: &NormConv, tail: &str| NormConv {
            conv: Conv2d {
                w: rename(&nc.conv.w, &format!("{tail}.w")),
                b: rename(&nc.conv.b, &format!("{tail}.b")),
                stride: nc.conv.stride,
                pad: nc.conv.pad,
            },
            norm: InstanceNorm {
                gain: rename(&nc.norm.gain, &format!("{tail}.norm.gain")),
                bias: rename(&nc.norm.bias, &format!("{tail}.norm.bias")),
            },
        };
        Self {
            c0: clone_nc(&self.c0, ".c0"),
            c1: clone_nc(&self.c1, ".c1"),
            c2: clone_nc(&self.c2, ".c2"),
            head: Conv2d {
                w: rename(&self.head.w, ".head.w"),
                b: rename(&self.head.b, ".head.b"),
                stride: self.head.stride,
                pad: self.head.pad,
            },
        }
    }
}

/// Strided convolutional classifier squashed to `[0, 1]` per sample.
pub struct Discriminator {
    c0: Conv2d,
    c1: NormConv,
    c2: NormConv,
    c3: Conv2d,
    head: Param,
    head_b: Param,
    flat_features: usize,
}

impl Discriminator {
    pub fn new(
        name: &str,
        cin: usize,
        nf: usize,
        resolution: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (h, w) = resolution;
        assert!(h % 16 == 0 && w % 16 == 0, "discriminator needs 16-divisible extents");
        let flat = (h / 16) * (w / 16) * 4 * nf;
        Self {
            c0: Conv2d::new(&format!("{name}.c0"), cin, nf, 3, 2, rng),
            c1: NormConv::new(&format!("{name}.c1"), nf, 2 * nf, 2, rng),
            c2: NormConv::new(&format!("{name}.c2"), 2 * nf, 4 * nf, 2, rng),
            c3: Conv2d::new(&format!("{name}.c3"), 4 * nf, 4 * nf, 3, 2, rng),
            head: Param::new(
                format!("{name}.head.w"),
                he_normal(rng, &[1, flat], flat),
            ),
            head_b: Param::new(format!("{name}.head.b"), ArrayD::zeros(IxDyn(&[1]))),
            flat_features: flat,
        }
    }

    /// `(B, C, H, W)` to `(B,)` scores in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let h0 = self.c0.forward(tape, x);
        let h0 = tape.leaky_relu(&h0, 0.2);
        let h1 = self.c1.forward(tape, &h0, 0.2);
        let h2 = self.c2.forward(tape, &h1, 0.2);
        let h3 = self.c3.forward(tape, &h2);
        let h3 = tape.leaky_relu(&h3, 0.2);
        let flat = tape.reshape(&h3, &[b, self.flat_features]);
        let w = tape.param(&self.head);
        let bb = tape.param(&self.head_b);
        let logits = tape.linear(&flat, &w, &bb);
        let scores = tape.sigmoid(&logits);
        tape.reshape(&scores, &[b])
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.c0.params();
        p.extend(self.c1.params());
        p.extend(self.c2.params());
        p.extend(self.c3.params());
        p.push(&self.head);
        p.push(&self.head_b);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.c0.params_mut();
        p.extend(self.c1.params_mut());
        p.extend(self.c2.params_mut());
        p.extend(self.c3.params_mut());
        p.push(&mut self.head);
        p.push(&mut self.head_b);
        p
    }
}

/// Fixed random-weight convolutional pyramid used as the perceptual feature
/// extractor. Never trained; the weights are seeded independently of the
/// run seed so features are identical across runs.
pub struct GammaNet {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

pub const GAMMA_FEATURE_SEED: u64 = 0x47414d4d41; // stable across runs

impl GammaNet {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(GAMMA_FEATURE_SEED);
        Self {
            c1: Conv2d::new("gamma.c1", 3, 8, 3, 1, &mut rng),
            c2: Conv2d::new("gamma.c2", 8, 16, 3, 1, &mut rng),
            c3: Conv2d::new("gamma.c3", 16, 32, 3, 1, &mut rng),
        }
    }

    /// Multi-scale features: raw pixels plus three conv stages at
    /// progressively halved resolutions.
    pub fn features(&self, tape: &mut Tape, x: &Tensor) -> Vec<Tensor> {
        let f1 = self.c1.forward(tape, x);
        let f1 = tape.relu(&f1);
        let p1 = tape.avg_pool2(&f1);
        let f2 = self.c2.forward(tape, &p1);
        let f2 = tape.relu(&f2);
        let p2 = tape.avg_pool2(&f2);
        let f3 = self.c3.forward(tape, &p2);
        let f3 = tape.relu(&f3);
        vec![x.clone(), f1, f2, f3]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.c1.params();
        p.extend(self.c2.params());
        p.extend(self.c3.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.c1.params_mut();
        p.extend(self.c2.params_mut());
        p.extend(self.c3.params_mut());
        p
    }
}

impl Default for GammaNet {
    fn default() -> Self {
        Self::new()
    }
}
