//! Batch samplers. Each sampler owns its own RNG stream keyed by
//! `(seed, stream_id)`, so batch order is reproducible regardless of how
//! the streams interleave.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::{KeypointSet, ThinPlateSplineWarp};

use super::{DatasetSplit, SyntheticDataset};

/// A batch of image pairs. Ground-truth keypoints ride along for evaluation
/// but are structurally invisible to the training losses (see
/// [`PairBatch::train_view`]).
pub struct PairBatch {
    /// Target images, `(B, 3, H, W)` in `[0, 1]`.
    pub x: ArrayD<f32>,
    /// Style images from the same sequence (or warped variants of the same
    /// source image), `(B, 3, H, W)`.
    pub x_prime: ArrayD<f32>,
    /// Evaluation-only ground truth for `x`.
    pub gt_keypoints: Option<Vec<KeypointSet>>,
    /// Source sequence per sample (identity metadata).
    pub sequence_ids: Vec<usize>,
}

/// The training loop's view of a batch: the two image tensors and nothing
/// else.
pub struct TrainView<'a> {
    pub x: &'a ArrayD<f32>,
    pub x_prime: &'a ArrayD<f32>,
}

impl PairBatch {
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            x: &self.x,
            x_prime: &self.x_prime,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }
}

fn rng_for_stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

fn frame_into(dst: &mut [f32], frame: &[u8]) {
    for (d, &s) in dst.iter_mut().zip(frame) {
        *d = s as f32 / 255.0;
    }
}

/// Sampler of image pairs from the image half of the split.
pub struct PairSampler {
    rng: ChaCha8Rng,
    image_half: Vec<usize>,
    /// TPS pair mode: warp magnitude (still-image datasets); `None` samples
    /// two frames of one sequence (video mode).
    tps_magnitude: Option<f64>,
    tps_grid: usize,
}

impl PairSampler {
    pub fn video_mode(split: &DatasetSplit, seed: u64, stream_id: u64) -> Result<Self> {
        if split.image_half.is_empty() {
            return Err(Error::Config("image half of the split is empty".into()));
        }
        Ok(Self {
            rng: rng_for_stream(seed, stream_id),
            image_half: split.image_half.clone(),
            tps_magnitude: None,
            tps_grid: 4,
        })
    }

    pub fn tps_mode(
        split: &DatasetSplit,
        seed: u64,
        stream_id: u64,
        magnitude: f64,
        grid: usize,
    ) -> Result<Self> {
        if split.image_half.is_empty() {
            return Err(Error::Config("image half of the split is empty".into()));
        }
        if magnitude < 0.0 {
            return Err(Error::Config("tps magnitude must be nonnegative".into()));
        }
        Ok(Self {
            rng: rng_for_stream(seed, stream_id),
            image_half: split.image_half.clone(),
            tps_magnitude: Some(magnitude),
            tps_grid: grid,
        })
    }

    pub fn sample(&mut self, dataset: &SyntheticDataset, batch: usize) -> Result<PairBatch> {
        let (h, w) = dataset.resolution;
        let plane = 3 * h * w;
        let mut x = vec![0.0f32; batch * plane];
        let mut x_prime = vec![0.0f32; batch * plane];
        let mut gt = Vec::with_capacity(batch);
        let mut seq_ids = Vec::with_capacity(batch);
        for b in 0..batch {
            let seq_id = self.image_half[self.rng.gen_range(0..self.image_half.len())];
            let seq = &dataset.sequences[seq_id];
            seq_ids.push(seq_id);
            match self.tps_magnitude {
                None => {
                    let t = seq.frames.len();
                    if t < 2 {
                        return Err(Error::Config(format!(
                            "sequence {seq_id} has fewer than 2 frames"
                        )));
                    }
                    let t1 = self.rng.gen_range(0..t);
                    let mut t2 = self.rng.gen_range(0..t - 1);
                    if t2 >= t1 {
                        t2 += 1;
                    }
                    frame_into(&mut x[b * plane..(b + 1) * plane], &seq.frames[t1]);
                    frame_into(&mut x_prime[b * plane..(b + 1) * plane], &seq.frames[t2]);
                    gt.push(seq.keypoints[t1].clone());
                }
                Some(mag) => {
                    let t = self.rng.gen_range(0..seq.frames.len());
                    let src: Vec<f32> =
                        seq.frames[t].iter().map(|&v| v as f32 / 255.0).collect();
                    let src3 =
                        ndarray::ArrayView3::from_shape((3, h, w), &src).unwrap();
                    let w1 = ThinPlateSplineWarp::sample(self.rng.gen(), mag, self.tps_grid);
                    let w2 = ThinPlateSplineWarp::sample(self.rng.gen(), mag, self.tps_grid);
                    let warped1 = crate::pose::tps_apply(&w1, src3);
                    let warped2 = crate::pose::tps_apply(&w2, src3);
                    x[b * plane..(b + 1) * plane]
                        .copy_from_slice(warped1.as_slice().unwrap());
                    x_prime[b * plane..(b + 1) * plane]
                        .copy_from_slice(warped2.as_slice().unwrap());
                    // Ground truth follows the first warp.
                    let moved: Vec<[f64; 2]> = seq.keypoints[t]
                        .coords()
                        .iter()
                        .map(|&p| w1.push_point(p, 25))
                        .collect();
                    gt.push(KeypointSet::new(moved)?);
                }
            }
        }
        Ok(PairBatch {
            x: ArrayD::from_shape_vec(IxDyn(&[batch, 3, h, w]), x).unwrap(),
            x_prime: ArrayD::from_shape_vec(IxDyn(&[batch, 3, h, w]), x_prime).unwrap(),
            gt_keypoints: Some(gt),
            sequence_ids: seq_ids,
        })
    }
}

/// Sampler of unpaired prior poses from the prior half of the split.
pub struct PriorSampler {
    rng: ChaCha8Rng,
    /// Deterministic `(sequence, frame)` enumeration of the prior pool.
    pool: Vec<(usize, usize)>,
}

impl PriorSampler {
    pub fn new(
        dataset: &SyntheticDataset,
        split: &DatasetSplit,
        seed: u64,
        stream_id: u64,
        prior_size_limit: Option<usize>,
    ) -> Result<Self> {
        if split.prior_half.is_empty() {
            return Err(Error::Config("prior half of the split is empty".into()));
        }
        let mut pool = Vec::new();
        for &s in &split.prior_half {
            for f in 0..dataset.sequences[s].frames.len() {
                pool.push((s, f));
            }
        }
        if let Some(limit) = prior_size_limit {
            if limit == 0 {
                return Err(Error::Config("prior_size_limit must be positive".into()));
            }
            if limit > pool.len() {
                return Err(Error::Config(format!(
                    "prior_size_limit {limit} exceeds available prior size {}",
                    pool.len()
                )));
            }
            pool.truncate(limit);
        }
        Ok(Self {
            rng: rng_for_stream(seed, stream_id),
            pool,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    /// Draw a `(B, K, 2)` f32 coordinate batch.
    pub fn sample(&mut self, dataset: &SyntheticDataset, batch: usize) -> Array3<f32> {
        let k = dataset.spec.num_keypoints();
        let mut out = Array3::<f32>::zeros((batch, k, 2));
        for b in 0..batch {
            let (s, f) = self.pool[self.rng.gen_range(0..self.pool.len())];
            for (ki, c) in dataset.sequences[s].keypoints[f].coords().iter().enumerate() {
                out[[b, ki, 0]] = c[0] as f32;
                out[[b, ki, 1]] = c[1] as f32;
            }
        }
        out
    }

    /// Source indices of the pool (used by disjointness audits).
    pub fn pool(&self) -> &[(usize, usize)] {
        &self.pool
    }

    /// Draw and also report which sequences the samples came from.
    pub fn sample_with_sources(
        &mut self,
        dataset: &SyntheticDataset,
        batch: usize,
    ) -> (Array3<f32>, Vec<usize>) {
        let k = dataset.spec.num_keypoints();
        let mut out = Array3::<f32>::zeros((batch, k, 2));
        let mut sources = Vec::with_capacity(batch);
        for b in 0..batch {
            let (s, f) = self.pool[self.rng.gen_range(0..self.pool.len())];
            sources.push(s);
            for (ki, c) in dataset.sequences[s].keypoints[f].coords().iter().enumerate() {
                out[[b, ki, 0]] = c[0] as f32;
                out[[b, ki, 1]] = c[1] as f32;
            }
        }
        (out, sources)
    }
}
