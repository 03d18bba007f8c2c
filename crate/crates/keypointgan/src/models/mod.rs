//! Parameterized forward contracts: the pose encoder, the conditional image
//! decoder, the skeleton-to-keypoints regressor, the pose discriminator and
//! the fixed perceptual feature extractor.

pub mod checkpoint;
mod nets;

pub use nets::{Conv2d, Discriminator, EtaNet, GammaNet, InstanceNorm, UNet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::EdgeSet;
use crate::tensor::{Param, Tape, Tensor};

/// How the perceptual feature extractor is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMode {
    /// Pixel-space loss: features are the image itself.
    Identity,
    /// Fixed random-weight convolutional pyramid (default).
    RandomConv,
}

impl GammaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "random_conv" => Ok(Self::RandomConv),
            other => Err(Error::Config(format!(
                "gamma_mode must be `identity` or `random_conv`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::RandomConv => "random_conv",
        }
    }
}

/// Widths, depths and wiring choices for every network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub resolution: (usize, usize),
    pub num_keypoints: usize,
    /// Base channel count for the encoder/decoder pair.
    pub base_channels: usize,
    pub eta_channels: usize,
    pub disc_channels: usize,
    pub gamma_mode: GammaMode,
    /// When false the decoder sees only the pose image (ablation).
    pub conditional_decoder: bool,
    /// Builds the conditional image discriminator (second-cycle ablation).
    pub with_image_discriminator: bool,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h % 16 != 0 || w % 16 != 0 || h == 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 16, got {h}x{w}"
            )));
        }
        if self.num_keypoints == 0 {
            return Err(Error::Config("num_keypoints must be positive".into()));
        }
        if self.base_channels == 0 || self.eta_channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            resolution: (64, 64),
            num_keypoints: 8,
            base_channels: 32,
            eta_channels: 16,
            disc_channels: 32,
            gamma_mode: GammaMode::RandomConv,
            conditional_decoder: true,
            with_image_discriminator: false,
        }
    }
}

/// All model parameters plus the frozen pre-trained snapshot of the
/// skeleton-to-keypoints regressor.
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub phi: UNet,
    pub psi: UNet,
    pub eta: EtaNet,
    pub disc: Discriminator,
    pub image_disc: Option<Discriminator>,
    pub gamma: GammaNet,
    eta_frozen: Option<EtaNet>,
}

impl ModelBundle {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let psi_cin = if arch.conditional_decoder { 4 } else { 1 };
        let phi = UNet::new("phi", 3, 1, arch.base_channels, &mut rng);
        let psi = UNet::new("psi", psi_cin, 3, arch.base_channels, &mut rng);
        let eta = EtaNet::new("eta", arch.num_keypoints, arch.eta_channels, &mut rng);
        let disc = Discriminator::new("disc", 1, arch.disc_channels, arch.resolution, &mut rng);
        let image_disc = if arch.with_image_discriminator {
            let cin = if arch.conditional_decoder { 6 } else { 3 };
            Some(Discriminator::new(
                "image_disc",
                cin,
                arch.disc_channels,
                arch.resolution,
                &mut rng,
            ))
        } else {
            None
        };
        Ok(Self {
            arch,
            phi,
            psi,
            eta,
            disc,
            image_disc,
            gamma: GammaNet::new(),
            eta_frozen: None,
        })
    }

    /// Pose encoder: image batch `(B, 3, H, W)` to skeleton image batch
    /// `(B, 1, H, W)` in `[0, 1]`.
    pub fn phi_forward(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        self.assert_image_shape(x, 3);
        self.phi.forward(tape, x)
    }

    /// Conditional decoder: pose image plus (optionally) a style image to an
    /// RGB reconstruction in `[0, 1]`. Conditioning is input-channel
    /// concatenation.
    pub fn psi_forward(&self, tape: &mut Tape, y_star: &Tensor, x_style: Option<&Tensor>) -> Tensor {
        self.assert_image_shape(y_star, 1);
        let input = match (self.arch.conditional_decoder, x_style) {
            (true, Some(style)) => {
                self.assert_image_shape(style, 3);
                tape.concat_channels(y_star, style)
            }
            (true, None) => panic!("conditional decoder requires a style image"),
            (false, _) => y_star.clone(),
        };
        self.psi.forward(tape, &input)
    }

    /// Skeleton image batch to `(B, K, 2)` keypoint coordinates.
    pub fn eta_forward(&self, tape: &mut Tape, y: &Tensor) -> Tensor {
        self.assert_image_shape(y, 1);
        self.eta.forward(tape, y)
    }

    /// Frozen pre-trained regressor; panics if pre-training has not run.
    pub fn eta_frozen_forward(&self, tape: &mut Tape, y: &Tensor) -> Tensor {
        self.eta_frozen
            .as_ref()
            .expect("eta snapshot not frozen yet")
            .forward(tape, y)
    }

    pub fn has_frozen_eta(&self) -> bool {
        self.eta_frozen.is_some()
    }

    /// Capture the current regressor parameters as the immutable snapshot.
    pub fn freeze_eta_snapshot(&mut self) {
        self.eta_frozen = Some(self.eta.clone_renamed("eta_frozen"));
    }

    /// Pose discriminator: `(B, 1, H, W)` to `(B,)` scores in `[0, 1]`.
    pub fn disc_forward(&self, tape: &mut Tape, y: &Tensor) -> Tensor {
        self.assert_image_shape(y, 1);
        self.disc.forward(tape, y)
    }

    /// Perceptual features under the configured mode.
    pub fn gamma_features(&self, tape: &mut Tape, x: &Tensor) -> Vec<Tensor> {
        match self.arch.gamma_mode {
            GammaMode::Identity => vec![x.clone()],
            GammaMode::RandomConv => self.gamma.features(tape, x),
        }
    }

    /// Convenience: full bottleneck readout `beta(eta(phi(x)))` coordinates.
    pub fn detect_keypoints(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        let y = self.phi_forward(tape, x);
        self.eta_forward(tape, &y)
    }

    /// Render coordinates with the model's resolution.
    pub fn render(&self, tape: &mut Tape, coords: &Tensor, edges: &EdgeSet, gamma: f64) -> Tensor {
        tape.render_skeleton(coords, edges, self.arch.resolution, gamma)
    }

    pub fn generator_params(&self) -> Vec<&Param> {
        let mut p = self.phi.params();
        p.extend(self.psi.params());
        p.extend(self.eta.params());
        p
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.phi.params_mut();
        p.extend(self.psi.params_mut());
        p.extend(self.eta.params_mut());
        p
    }

    pub fn disc_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.disc.params_mut();
        if let Some(d) = &mut self.image_disc {
            p.extend(d.params_mut());
        }
        p
    }

    /// Every parameter collection, including the fixed feature extractor and
    /// the frozen snapshot, for checkpointing.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut p = self.generator_params();
        p.extend(self.disc.params());
        if let Some(d) = &self.image_disc {
            p.extend(d.params());
        }
        p.extend(self.gamma.params());
        if let Some(f) = &self.eta_frozen {
            p.extend(f.params());
        }
        p
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.phi.params_mut();
        p.extend(self.psi.params_mut());
        p.extend(self.eta.params_mut());
        p.extend(self.disc.params_mut());
        if let Some(d) = &mut self.image_disc {
            p.extend(d.params_mut());
        }
        p.extend(self.gamma.params_mut());
        if let Some(f) = &mut self.eta_frozen {
            p.extend(f.params_mut());
        }
        p
    }

    pub(crate) fn restore_frozen_eta_shell(&mut self) {
        if self.eta_frozen.is_none() {
            self.eta_frozen = Some(self.eta.clone_renamed("eta_frozen"));
        }
    }

    fn assert_image_shape(&self, t: &Tensor, channels: usize) {
        let s = t.shape();
        let (h, w) = self.arch.resolution;
        assert!(
            s.len() == 4 && s[1] == channels && s[2] == h && s[3] == w,
            "expected (B, {channels}, {h}, {w}) input, got {s:?}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            resolution: (32, 32),
            num_keypoints: 4,
            base_channels: 4,
            eta_channels: 4,
            disc_channels: 4,
            ..ArchConfig::default()
        }
    }

    fn rand_image(b: usize, c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[b, c, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn arch_rejects_bad_resolution() {
        let mut arch = small_arch();
        arch.resolution = (30, 30);
        assert!(ModelBundle::new(arch, 0).is_err());
    }

    #[test]
    fn phi_shape_and_range() {
        let model = ModelBundle::new(small_arch(), 0).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(rand_image(3, 3, 32, 32, 1));
        let y = model.phi_forward(&mut tape, &x);
        assert_eq!(y.shape(), &[3, 1, 32, 32]);
        for &v in y.data.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn psi_shape_and_conditioning() {
        let model = ModelBundle::new(small_arch(), 0).unwrap();
        let mut tape = Tape::inference();
        let y = tape.constant(rand_image(2, 1, 32, 32, 2));
        let style = tape.constant(rand_image(2, 3, 32, 32, 3));
        let xhat = model.psi_forward(&mut tape, &y, Some(&style));
        assert_eq!(xhat.shape(), &[2, 3, 32, 32]);
        for &v in xhat.data.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn eta_shape_and_blank_input() {
        let model = ModelBundle::new(small_arch(), 0).unwrap();
        let mut tape = Tape::inference();
        let blank = tape.constant(ArrayD::zeros(IxDyn(&[2, 1, 32, 32])));
        let coords = model.eta_forward(&mut tape, &blank);
        assert_eq!(coords.shape(), &[2, 4, 2]);
        for &v in coords.data.iter() {
            assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn disc_shape_range_and_determinism() {
        let model = ModelBundle::new(small_arch(), 0).unwrap();
        let img = rand_image(4, 1, 32, 32, 4);
        let mut tape = Tape::inference();
        let y = tape.constant(img.clone());
        let s1 = model.disc_forward(&mut tape, &y);
        assert_eq!(s1.shape(), &[4]);
        for &v in s1.data.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        // Identical inputs give identical scores.
        let mut tape2 = Tape::inference();
        let y2 = tape2.constant(img);
        let s2 = model.disc_forward(&mut tape2, &y2);
        assert_eq!(s1.data.as_slice().unwrap(), s2.data.as_slice().unwrap());
    }

    #[test]
    fn forward_passes_preserve_batch_order() {
        let model = ModelBundle::new(small_arch(), 0).unwrap();
        let a = rand_image(1, 3, 32, 32, 5);
        let b = rand_image(1, 3, 32, 32, 6);
        let mut joint = ArrayD::zeros(IxDyn(&[2, 3, 32, 32]));
        joint.slice_mut(ndarray::s![0..1, .., .., ..]).assign(&a);
        joint.slice_mut(ndarray::s![1..2, .., .., ..]).assign(&b);
        let mut tape = Tape::inference();
        let xj = tape.constant(joint);
        let yj = model.phi_forward(&mut tape, &xj);
        let xa = tape.constant(a);
        let ya = model.phi_forward(&mut tape, &xa);
        let yj0 = yj.data.slice(ndarray::s![0..1, .., .., ..]);
        let diff = (&yj0 - &ya.data.view())
            .iter()
            .map(|v| v.abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "batch context changed sample output: {diff}");
    }

    #[test]
    fn gamma_identity_mode_and_determinism() {
        let mut arch = small_arch();
        arch.gamma_mode = GammaMode::Identity;
        let model = ModelBundle::new(arch, 0).unwrap();
        let img = rand_image(1, 3, 32, 32, 7);
        let mut tape = Tape::inference();
        let x = tape.constant(img.clone());
        let feats = model.gamma_features(&mut tape, &x);
        assert_eq!(feats.len(), 1);
        assert_eq!(&*feats[0].data, &img);

        // Random-conv mode: bit-exact across calls and across bundles.
        let m1 = ModelBundle::new(small_arch(), 1).unwrap();
        let m2 = ModelBundle::new(small_arch(), 2).unwrap();
        let f1 = m1.gamma_features(&mut tape, &x);
        let f2 = m2.gamma_features(&mut tape, &x);
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a.data.as_slice().unwrap(), b.data.as_slice().unwrap());
        }
    }

    #[test]
    fn gamma_features_are_continuous() {
        let model = ModelBundle::new(small_arch(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10 {
            let x0 = rand_image(1, 3, 32, 32, 100 + trial);
            let mut feature_norm = |eps: f32| -> f64 {
                let mut tape = Tape::inference();
                let xa = tape.constant(x0.clone());
                let mut xb_arr = x0.clone();
                let idx = rng.gen_range(0..xb_arr.len());
                xb_arr.as_slice_mut().unwrap()[idx] += eps;
                let xb = tape.constant(xb_arr);
                let fa = model.gamma_features(&mut tape, &xa);
                let fb = model.gamma_features(&mut tape, &xb);
                fa.iter()
                    .zip(&fb)
                    .map(|(a, b)| {
                        a.data
                            .iter()
                            .zip(b.data.iter())
                            .map(|(u, v)| ((u - v) as f64).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    .sqrt()
            };
            let big = feature_norm(1e-3);
            let small = feature_norm(1e-4);
            assert!(small <= big + 1e-9, "not contracting: {small} vs {big}");
        }
    }

    #[test]
    fn frozen_eta_is_immutable_snapshot() {
        let mut model = ModelBundle::new(small_arch(), 0).unwrap();
        model.freeze_eta_snapshot();
        let img = rand_image(1, 1, 32, 32, 9);
        let mut tape = Tape::inference();
        let y = tape.constant(img.clone());
        let before = model.eta_frozen_forward(&mut tape, &y);
        // Mutate the live regressor.
        for p in model.eta.params_mut() {
            p.value_mut().mapv_inplace(|v| v + 0.5);
        }
        let mut tape2 = Tape::inference();
        let y2 = tape2.constant(img);
        let after = model.eta_frozen_forward(&mut tape2, &y2);
        assert_eq!(
            before.data.as_slice().unwrap(),
            after.data.as_slice().unwrap()
        );
    }
}
