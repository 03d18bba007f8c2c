//! Loss functions: perceptual reconstruction, the least-squares adversarial
//! pair, the regressor pre-training and fine-tuning terms, and the optional
//! second-cycle term used by ablations.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::pose::EdgeSet;
use crate::tensor::{Tape, Tensor};

/// Reduction convention for the perceptual loss.
///
/// `Normalized` divides each per-sample squared feature distance by the
/// total feature element count, keeping magnitudes resolution-independent
/// (the default). `RawSum` keeps the plain squared norm per sample.
/// Both average over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptualReduction {
    Normalized,
    RawSum,
}

impl PerceptualReduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw_sum" => Ok(Self::RawSum),
            other => Err(Error::Config(format!(
                "perceptual_reduction must be `normalized` or `raw_sum`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Normalized => "normalized",
            Self::RawSum => "raw_sum",
        }
    }
}

fn mean_of_vector(tape: &mut Tape, v: &Tensor) -> Tensor {
    tape.mean_all(v)
}

/// Squared feature-space distance between two feature pyramids, averaged
/// over the batch.
pub fn perceptual_loss_features(
    tape: &mut Tape,
    feats_a: &[Tensor],
    feats_b: &[Tensor],
    reduction: PerceptualReduction,
) -> Tensor {
    assert_eq!(feats_a.len(), feats_b.len(), "feature pyramid mismatch");
    assert!(!feats_a.is_empty());
    let batch = feats_a[0].shape()[0];
    let mut per_sample: Option<Tensor> = None;
    let mut total_dim = 0usize;
    for (fa, fb) in feats_a.iter().zip(feats_b) {
        assert_eq!(fa.shape(), fb.shape(), "feature shape mismatch");
        total_dim += fa.data.len() / batch;
        let diff = tape.sub(fa, fb);
        let ss = tape.sum_sq_per_sample(&diff);
        per_sample = Some(match per_sample {
            Some(acc) => tape.add(&acc, &ss),
            None => ss,
        });
    }
    let per_sample = per_sample.unwrap();
    let scaled = match reduction {
        PerceptualReduction::RawSum => per_sample,
        PerceptualReduction::Normalized => tape.scale(&per_sample, 1.0 / total_dim as f32),
    };
    mean_of_vector(tape, &scaled)
}

/// Full perceptual loss: extract features with the model's configured
/// extractor and compare.
pub fn perceptual_loss(
    tape: &mut Tape,
    model: &ModelBundle,
    x_hat: &Tensor,
    x: &Tensor,
    reduction: PerceptualReduction,
) -> Tensor {
    assert_eq!(x_hat.shape(), x.shape(), "perceptual loss shape mismatch");
    let fa = model.gamma_features(tape, x_hat);
    let fb = model.gamma_features(tape, x);
    perceptual_loss_features(tape, &fa, &fb, reduction)
}

fn one_minus(tape: &mut Tape, t: &Tensor) -> Tensor {
    let ones = tape.constant(ArrayD::from_elem(IxDyn(t.shape()), 1.0f32));
    tape.sub(&ones, t)
}

/// Least-squares adversarial objective:
/// `mean(D(prior)^2) + mean((1 - D(predicted))^2)`.
///
/// The discriminator *ascends* this value (it drives prior scores to 1 and
/// predicted scores to 0 within `[0, 1]`); the encoder descends the second
/// term only.
pub fn discriminator_loss(
    tape: &mut Tape,
    scores_real: &Tensor,
    scores_fake: &Tensor,
) -> Result<Tensor> {
    if scores_real.data.is_empty() || scores_fake.data.is_empty() {
        return Err(Error::Shape("discriminator_loss on an empty batch".into()));
    }
    let real_sq = tape.square(scores_real);
    let real_term = mean_of_vector(tape, &real_sq);
    let fake_gap = one_minus(tape, scores_fake);
    let fake_sq = tape.square(&fake_gap);
    let fake_term = mean_of_vector(tape, &fake_sq);
    Ok(tape.add(&real_term, &fake_term))
}

/// The encoder-side adversarial term `mean((1 - D(predicted))^2)`.
pub fn generator_adversarial_term(tape: &mut Tape, scores_fake: &Tensor) -> Result<Tensor> {
    if scores_fake.data.is_empty() {
        return Err(Error::Shape(
            "generator_adversarial_term on an empty batch".into(),
        ));
    }
    let gap = one_minus(tape, scores_fake);
    let sq = tape.square(&gap);
    Ok(mean_of_vector(tape, &sq))
}

/// Generator objective value: `lambda * adversarial + perceptual`.
pub fn total_loss(perceptual: f64, gen_adversarial: f64, lambda: f64) -> f64 {
    lambda * gen_adversarial + perceptual
}

/// Mean squared error over every element.
pub fn mse(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Tensor {
    let diff = tape.sub(a, b);
    let sq = tape.square(&diff);
    tape.mean_all(&sq)
}

/// Regressor pre-training loss: render the prior poses, read them back with
/// the regressor, and penalize the squared coordinate error (averaged over
/// batch, keypoints and axes, so `loss = RMS^2` per scalar coordinate).
pub fn eta_pretrain_loss(
    tape: &mut Tape,
    model: &ModelBundle,
    prior_coords: &Tensor,
    edges: &EdgeSet,
    gamma: f64,
) -> Tensor {
    let rendered = model.render(tape, prior_coords, edges, gamma);
    let recovered = model.eta_forward(tape, &rendered);
    mse(tape, &recovered, prior_coords)
}

/// Fine-tuning loss: the pre-training term plus
/// `lambda_prime * mean((beta(eta(y)) - y)^2)` on reconstructed pose images,
/// which keeps the regressor accurate on poses the encoder actually emits.
#[allow(clippy::too_many_arguments)]
pub fn eta_finetune_loss(
    tape: &mut Tape,
    model: &ModelBundle,
    y: &Tensor,
    prior_coords: &Tensor,
    edges: &EdgeSet,
    gamma: f64,
    lambda_prime: f64,
) -> Tensor {
    let pretrain = eta_pretrain_loss(tape, model, prior_coords, edges, gamma);
    if lambda_prime == 0.0 {
        return pretrain;
    }
    let coords = model.eta_forward(tape, y);
    let re_rendered = model.render(tape, &coords, edges, gamma);
    let pixel_term = mse(tape, &re_rendered, y);
    let scaled = tape.scale(&pixel_term, lambda_prime as f32);
    tape.add(&pretrain, &scaled)
}

/// Second cycle-consistency term (ablation only):
/// `mean((phi(psi(y_bar, x_style)) - y_bar)^2)`.
pub fn second_cycle_loss(
    tape: &mut Tape,
    model: &ModelBundle,
    y_bar: &Tensor,
    x_style: Option<&Tensor>,
    enabled: bool,
) -> Result<Tensor> {
    if !enabled {
        return Err(Error::Config(
            "second_cycle_loss invoked while the second_cycle flag is disabled".into(),
        ));
    }
    let decoded = model.psi_forward(tape, y_bar, x_style);
    let re_encoded = model.phi_forward(tape, &decoded);
    Ok(mse(tape, &re_encoded, y_bar))
}

/// One logging row of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub perceptual: f64,
    pub disc: f64,
    pub gen_adv: f64,
    pub eta_pretrain: f64,
    pub eta_finetune: f64,
    pub cycle2: Option<f64>,
    pub lambda: f64,
    pub lambda_prime: f64,
}

impl LossReport {
    /// `total` is the generator objective:
    /// `lambda * gen_adv + perceptual + eta_finetune (+ cycle2 when active)`.
    pub fn assemble(
        perceptual: f64,
        disc: f64,
        gen_adv: f64,
        eta_pretrain: f64,
        eta_finetune: f64,
        cycle2: Option<f64>,
        lambda: f64,
        lambda_prime: f64,
    ) -> Self {
        let total =
            total_loss(perceptual, gen_adv, lambda) + eta_finetune + cycle2.unwrap_or(0.0);
        Self {
            total,
            perceptual,
            disc,
            gen_adv,
            eta_pretrain,
            eta_finetune,
            cycle2,
            lambda,
            lambda_prime,
        }
    }

    pub fn is_finite(&self) -> std::result::Result<(), &'static str> {
        if !self.perceptual.is_finite() {
            return Err("perceptual");
        }
        if !self.disc.is_finite() {
            return Err("disc");
        }
        if !self.gen_adv.is_finite() {
            return Err("gen_adv");
        }
        if !self.eta_finetune.is_finite() || !self.eta_pretrain.is_finite() {
            return Err("eta");
        }
        if let Some(c) = self.cycle2 {
            if !c.is_finite() {
                return Err("cycle2");
            }
        }
        if !self.total.is_finite() {
            return Err("total");
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "iteration,total,perceptual,disc,gen_adv,eta_finetune,wall_time_s"
    }

    pub fn csv_row(&self, iteration: u64, wall_time_s: f64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{:.3}",
            self.total, self.perceptual, self.disc, self.gen_adv, self.eta_finetune, wall_time_s
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchConfig, GammaMode};
    use crate::tensor::testutil::check_gradient;
    use crate::tensor::Param;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_model(gamma_mode: GammaMode) -> ModelBundle {
        ModelBundle::new(
            ArchConfig {
                resolution: (32, 32),
                num_keypoints: 3,
                base_channels: 4,
                eta_channels: 4,
                disc_channels: 4,
                gamma_mode,
                ..ArchConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn scores(tape: &Tape, values: &[f32]) -> Tensor {
        tape.constant(ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap())
    }

    #[test]
    fn perceptual_zero_on_equal_inputs() {
        let model = small_model(GammaMode::RandomConv);
        let mut tape = Tape::inference();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 32, 32]), 0.4f32));
        let loss = perceptual_loss(&mut tape, &model, &x, &x, PerceptualReduction::Normalized);
        assert_eq!(loss.scalar(), 0.0);
    }

    #[test]
    fn perceptual_identity_single_pixel_raw() {
        // Identity features, one pixel of one channel differing by 0.5:
        // raw squared norm is 0.25.
        let model = small_model(GammaMode::Identity);
        let mut tape = Tape::inference();
        let a = ArrayD::from_elem(IxDyn(&[1, 3, 32, 32]), 0.25f32);
        let mut b = a.clone();
        b[[0, 1, 7, 9]] += 0.5;
        let xa = tape.constant(a);
        let xb = tape.constant(b);
        let raw = perceptual_loss(&mut tape, &model, &xa, &xb, PerceptualReduction::RawSum);
        assert_abs_diff_eq!(raw.scalar() as f64, 0.25, epsilon = 1e-9);
        // Normalized mode divides by the element count.
        let norm = perceptual_loss(&mut tape, &model, &xa, &xb, PerceptualReduction::Normalized);
        assert_abs_diff_eq!(
            norm.scalar() as f64,
            0.25 / (3.0 * 32.0 * 32.0),
            epsilon = 1e-9
        );
    }

    #[test]
    fn perceptual_batch_mean_of_per_sample_sums() {
        let model = small_model(GammaMode::Identity);
        let mut tape = Tape::inference();
        let a = ArrayD::zeros(IxDyn(&[2, 3, 32, 32]));
        let mut b = a.clone();
        b[[0, 0, 0, 0]] = 1.0; // sample 0: squared distance 1
        b[[1, 0, 0, 0]] = 2.0; // sample 1: squared distance 4
        let xa = tape.constant(a);
        let xb = tape.constant(b);
        let raw = perceptual_loss(&mut tape, &model, &xa, &xb, PerceptualReduction::RawSum);
        assert_abs_diff_eq!(raw.scalar() as f64, (1.0 + 4.0) / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn discriminator_loss_unit_values() {
        let mut tape = Tape::inference();
        let cases = [
            (vec![1.0f32; 3], vec![0.0f32; 4], 2.0f64),
            (vec![0.5; 2], vec![0.5; 2], 0.5),
            (vec![0.0; 5], vec![1.0; 5], 0.0),
        ];
        for (real, fake, expected) in cases {
            let r = scores(&tape, &real);
            let f = scores(&tape, &fake);
            let loss = discriminator_loss(&mut tape, &r, &f).unwrap();
            assert_abs_diff_eq!(loss.scalar() as f64, expected, epsilon = 1e-9);
        }
        let empty = scores(&tape, &[]);
        let some = scores(&tape, &[0.5]);
        assert!(discriminator_loss(&mut tape, &empty, &some).is_err());
    }

    #[test]
    fn generator_term_unit_values() {
        let mut tape = Tape::inference();
        let one = scores(&tape, &[1.0, 1.0]);
        assert_abs_diff_eq!(
            generator_adversarial_term(&mut tape, &one).unwrap().scalar() as f64,
            0.0,
            epsilon = 1e-9
        );
        let zero = scores(&tape, &[0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(
            generator_adversarial_term(&mut tape, &zero).unwrap().scalar() as f64,
            1.0,
            epsilon = 1e-9
        );
        let mixed = scores(&tape, &[0.2, 0.6]);
        assert_abs_diff_eq!(
            generator_adversarial_term(&mut tape, &mixed).unwrap().scalar() as f64,
            0.40,
            epsilon = 1e-7
        );
        let empty = scores(&tape, &[]);
        assert!(generator_adversarial_term(&mut tape, &empty).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        assert_abs_diff_eq!(total_loss(1.0, 0.5, 10.0), 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total_loss(0.7, 0.9, 0.0), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn eta_pretrain_trivial_cases() {
        // A perfect regressor has zero loss; rather than construct one, check
        // the algebraic form: loss of x against itself is 0, and the loss of
        // all-zero predictions against coords equals the mean squared
        // coordinate (documented averaging convention).
        let mut tape = Tape::inference();
        let coords =
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0.3f32, -0.1, 0.2, 0.4]).unwrap();
        let p = tape.constant(coords.clone());
        let zero = tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 2])));
        assert_eq!(mse(&mut tape, &p, &p).scalar(), 0.0);
        let expected: f64 =
            coords.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(
            mse(&mut tape, &zero, &p).scalar() as f64,
            expected,
            epsilon = 1e-9
        );
    }

    #[test]
    fn eta_finetune_reduces_to_pretrain_at_zero_lambda_prime() {
        let model = small_model(GammaMode::Identity);
        let edges = EdgeSet::new("t", 3, vec![(0, 1), (1, 2)], vec![]).unwrap();
        let mut tape = Tape::inference();
        let prior = tape.constant(ArrayD::from_shape_vec(
            IxDyn(&[2, 3, 2]),
            vec![0.1f32, 0.2, -0.3, 0.4, 0.0, -0.5, 0.5, 0.5, -0.5, -0.5, 0.2, 0.1],
        )
        .unwrap());
        let y = tape.constant(ArrayD::from_elem(IxDyn(&[2, 1, 32, 32]), 0.1f32));
        let a = eta_pretrain_loss(&mut tape, &model, &prior, &edges, 25.0);
        let b = eta_finetune_loss(&mut tape, &model, &y, &prior, &edges, 25.0, 0.0);
        assert_eq!(a.scalar(), b.scalar());
        // Fixed point: y already equal to beta(eta(y)) makes the second term 0.
        let coords_t = model.eta_forward(&mut tape, &y);
        let y_fix = model.render(&mut tape, &coords_t, &edges, 25.0);
        let with_term = eta_finetune_loss(&mut tape, &model, &y_fix, &prior, &edges, 25.0, 0.1);
        let base = eta_pretrain_loss(&mut tape, &model, &prior, &edges, 25.0);
        let second = (with_term.scalar() - base.scalar()) as f64 / 0.1;
        // Not an exact fixed point for a random regressor, but re-rendering
        // its own readout must be close to idempotent.
        assert!(second >= 0.0);
        let coords2 = model.eta_forward(&mut tape, &y_fix);
        let y_fix2 = model.render(&mut tape, &coords2, &edges, 25.0);
        let direct = mse(&mut tape, &y_fix2, &y_fix);
        assert_abs_diff_eq!(second, direct.scalar() as f64, epsilon = 1e-6);
    }

    #[test]
    fn second_cycle_rejected_when_disabled() {
        let model = small_model(GammaMode::Identity);
        let mut tape = Tape::inference();
        let y = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 32, 32]), 0.2f32));
        let style = tape.constant(ArrayD::from_elem(IxDyn(&[1, 3, 32, 32]), 0.5f32));
        assert!(second_cycle_loss(&mut tape, &model, &y, Some(&style), false).is_err());
        let ok = second_cycle_loss(&mut tape, &model, &y, Some(&style), true).unwrap();
        assert!(ok.scalar().is_finite() && ok.scalar() >= 0.0);
    }

    #[test]
    fn loss_report_total_and_csv() {
        let r = LossReport::assemble(1.0, 0.5, 0.5, 0.01, 0.02, None, 10.0, 0.1);
        assert_abs_diff_eq!(r.total, 10.0 * 0.5 + 1.0 + 0.02, epsilon = 1e-12);
        assert!(r.is_finite().is_ok());
        let row = r.csv_row(17, 0.25);
        assert!(row.starts_with("17,"));
        assert_eq!(row.split(',').count(), LossReport::csv_header().split(',').count());
        let bad = LossReport::assemble(f64::NAN, 0.0, 0.0, 0.0, 0.0, None, 10.0, 0.1);
        assert_eq!(bad.is_finite().unwrap_err(), "perceptual");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Gradient probes through each differentiable loss w.r.t. its direct
        // tensor input.
        let mut rng = ChaCha8Rng::seed_from_u64(31);

        // Perceptual (identity features) w.r.t. x_hat. Small tensors keep
        // the raw-sum loss magnitude inside f32 finite-difference range.
        let model = small_model(GammaMode::Identity);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |_| rng.gen_range(0.0..1.0f32));
        let mut p = Param::new(
            "x_hat",
            ArrayD::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |_| rng.gen_range(0.0..1.0f32)),
        );
        check_gradient(
            &mut p,
            |tape, xh| {
                let xt = tape.constant(x.clone());
                perceptual_loss(tape, &model, xh, &xt, PerceptualReduction::RawSum)
            },
            10,
            1e-2,
        );

        // Discriminator loss w.r.t. fake scores.
        let mut s = Param::new(
            "scores",
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.3, 0.7, 0.5, 0.2]).unwrap(),
        );
        check_gradient(
            &mut s,
            |tape, fake| {
                let real = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 0.6f32));
                discriminator_loss(tape, &real, fake).unwrap()
            },
            4,
            1e-2,
        );

        // Eta fine-tune loss through render and readout. A single-edge
        // topology avoids cross-edge minimizer ties, where finite
        // differences and the (envelope-exact) analytic gradient rightly
        // disagree.
        let arch = ArchConfig {
            resolution: (32, 32),
            num_keypoints: 2,
            base_channels: 4,
            eta_channels: 4,
            disc_channels: 4,
            gamma_mode: GammaMode::Identity,
            ..ArchConfig::default()
        };
        let model2 = ModelBundle::new(arch, 0).unwrap();
        let edges = EdgeSet::new("t", 2, vec![(0, 1)], vec![]).unwrap();
        let prior = ArrayD::from_shape_vec(
            IxDyn(&[2, 2, 2]),
            vec![0.1f32, 0.2, -0.3, 0.4, 0.5, 0.5, -0.5, -0.5],
        )
        .unwrap();
        let y_img = ArrayD::from_shape_fn(IxDyn(&[2, 1, 32, 32]), |_| rng.gen_range(0.0..1.0f32));
        let mut probe = Param::new(
            "coords_probe",
            ArrayD::from_shape_vec(IxDyn(&[2, 2, 2]), vec![0.05f32; 8]).unwrap(),
        );
        // Step 1e-4 matches the renderer's gradient contract; the distance
        // field's curvature makes 1e-3 steps visibly second-order.
        crate::tensor::testutil::check_gradient_opts(
            &mut probe,
            |tape, delta| {
                let base = tape.constant(prior.clone());
                let shifted = tape.add(&base, delta);
                let y = tape.constant(y_img.clone());
                eta_finetune_loss(tape, &model2, &y, &shifted, &edges, 25.0, 0.1)
            },
            6,
            1e-2,
            1e-2,
            1e-4,
        );
    }
}
