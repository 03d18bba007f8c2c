//! Synthetic dataset generation, the image/prior split, and the three
//! training samplers (frame pairs, warp pairs, unpaired prior poses).

mod disk;
mod figure;
mod sampler;

pub use disk::{export_prior, load_dataset, save_dataset};
pub use figure::{fnv1a64, generate_sequence, Sequence, SyntheticFigureSpec};
pub use sampler::{PairBatch, PairSampler, PriorSampler, TrainView};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::KeypointSet;

/// A generated dataset held in memory: frames stay 8-bit (identical to the
/// on-disk PNG payload), keypoints stay exact.
pub struct SyntheticDataset {
    pub spec: SyntheticFigureSpec,
    pub resolution: (usize, usize),
    pub seed: u64,
    pub sequences: Vec<Sequence>,
}

impl SyntheticDataset {
    pub fn generate(
        spec: SyntheticFigureSpec,
        seed: u64,
        num_sequences: usize,
        frames_per_sequence: usize,
        resolution: (usize, usize),
    ) -> Result<Self> {
        spec.validate()?;
        if num_sequences < 2 {
            return Err(Error::Config(
                "need at least 2 sequences to split into disjoint halves".into(),
            ));
        }
        let mut sequences = Vec::with_capacity(num_sequences);
        for s in 0..num_sequences {
            let seq_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(0x51ed2701 + s as u64);
            sequences.push(generate_sequence(&spec, seq_seed, frames_per_sequence, resolution)?);
        }
        Ok(Self {
            spec,
            resolution,
            seed,
            sequences,
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn frames_per_sequence(&self) -> usize {
        self.sequences.first().map(|s| s.frames.len()).unwrap_or(0)
    }

    /// Decode one frame to f32 RGB planes in `[0, 1]`.
    pub fn frame_f32(&self, sequence: usize, frame: usize) -> Vec<f32> {
        self.sequences[sequence].frames[frame]
            .iter()
            .map(|&v| v as f32 / 255.0)
            .collect()
    }

    pub fn keypoints(&self, sequence: usize, frame: usize) -> &KeypointSet {
        &self.sequences[sequence].keypoints[frame]
    }
}

/// Disjoint halves of the sequence index space: one half supplies image
/// pairs, the other supplies the unpaired pose prior, so no pose sample is
/// an annotation of any training image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub image_half: Vec<usize>,
    pub prior_half: Vec<usize>,
    /// Human-readable record of the disjointness audit run at construction.
    pub audit: String,
}

/// Randomly split `num_sequences` indices into disjoint halves. An odd count
/// gives the extra sequence to the image half.
pub fn build_split(num_sequences: usize, rng_seed: u64) -> Result<DatasetSplit> {
    if num_sequences < 2 {
        return Err(Error::Config(format!(
            "cannot split {num_sequences} sequences into two halves"
        )));
    }
    let mut indices: Vec<usize> = (0..num_sequences).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5117_2b6d);
    indices.shuffle(&mut rng);
    let image_count = num_sequences - num_sequences / 2;
    let mut image_half = indices[..image_count].to_vec();
    let mut prior_half = indices[image_count..].to_vec();
    image_half.sort_unstable();
    prior_half.sort_unstable();
    let disjoint = image_half.iter().all(|i| !prior_half.contains(i));
    assert!(disjoint, "split construction produced overlapping halves");
    let audit = format!(
        "disjoint=ok n={num_sequences} image={} prior={} seed={rng_seed}",
        image_half.len(),
        prior_half.len()
    );
    Ok(DatasetSplit {
        image_half,
        prior_half,
        audit,
    })
}

impl DatasetSplit {
    /// Re-check disjointness and coverage against a dataset.
    pub fn verify(&self, num_sequences: usize) -> Result<()> {
        let mut seen = vec![0u8; num_sequences];
        for &i in self.image_half.iter().chain(&self.prior_half) {
            if i >= num_sequences {
                return Err(Error::Config(format!("split index {i} out of range")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Config(
                "split halves overlap or do not cover the dataset".into(),
            ));
        }
        Ok(())
    }
}
