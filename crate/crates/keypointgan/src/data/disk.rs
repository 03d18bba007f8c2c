//! On-disk dataset layout: one directory per sequence holding numbered PNG
//! frames, a keypoint sample file and a `meta` text file; the dataset root
//! carries the topology file and a `dataset_meta` summary.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pose::{load_keypoint_samples, load_topology, save_keypoint_samples, save_topology};

use super::figure::Sequence;
use super::{SyntheticDataset, SyntheticFigureSpec};

pub fn save_dataset(dataset: &SyntheticDataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    save_topology(&dataset.spec.edges, &root.join("topology.topo"))?;
    let (h, w) = dataset.resolution;
    let mut meta = String::new();
    writeln!(meta, "seed {}", dataset.seed).unwrap();
    writeln!(meta, "spec_hash {:016x}", dataset.spec.content_hash()).unwrap();
    writeln!(meta, "sequences {}", dataset.num_sequences()).unwrap();
    writeln!(meta, "frames_per_sequence {}", dataset.frames_per_sequence()).unwrap();
    writeln!(meta, "resolution {h} {w}").unwrap();
    writeln!(meta, "motion_smoothness {}", dataset.spec.motion_smoothness).unwrap();
    writeln!(meta, "appearance_seed_space {}", dataset.spec.appearance_seed_space).unwrap();
    for (ei, l) in dataset.spec.limb_lengths.iter().enumerate() {
        writeln!(meta, "limb_length {ei} {l}").unwrap();
    }
    for (ki, (lo, hi)) in dataset.spec.joint_angle_ranges.iter().enumerate() {
        writeln!(meta, "angle_range {ki} {lo} {hi}").unwrap();
    }
    std::fs::write(root.join("dataset_meta"), meta)?;

    for (si, seq) in dataset.sequences.iter().enumerate() {
        let dir = root.join(format!("seq_{si:04}"));
        std::fs::create_dir_all(&dir)?;
        for (fi, frame) in seq.frames.iter().enumerate() {
            let path = dir.join(format!("frame_{fi:04}.png"));
            write_planar_png(&path, frame, h, w)?;
        }
        save_keypoint_samples(&seq.keypoints, &dir.join("keypoints.kpts"))?;
        let mut smeta = String::new();
        writeln!(smeta, "seed {}", dataset.seed).unwrap();
        writeln!(smeta, "spec_hash {:016x}", dataset.spec.content_hash()).unwrap();
        writeln!(smeta, "appearance_seed {}", seq.appearance_seed).unwrap();
        std::fs::write(dir.join("meta"), smeta)?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<SyntheticDataset> {
    let edges = load_topology(&root.join("topology.topo"))?;
    let meta_path = root.join("dataset_meta");
    let meta = std::fs::read_to_string(&meta_path)?;
    let perr = |message: String| Error::Parse {
        path: meta_path.display().to_string(),
        message,
    };
    let mut seed = 0u64;
    let mut sequences = 0usize;
    let mut frames_per_sequence = 0usize;
    let mut resolution = (0usize, 0usize);
    let mut motion_smoothness = 12.0f64;
    let mut appearance_seed_space = 1u64 << 20;
    let mut limb_lengths = vec![0.0; edges.edges().len()];
    let mut angle_ranges = vec![(0.0, 0.0); edges.num_keypoints()];
    for line in meta.lines() {
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let mut next = || -> Result<String> {
            parts
                .next()
                .map(str::to_string)
                .ok_or_else(|| perr(format!("missing field in `{line}`")))
        };
        match tag {
            "seed" => seed = next()?.parse().map_err(|e| perr(format!("{e}")))?,
            "sequences" => sequences = next()?.parse().map_err(|e| perr(format!("{e}")))?,
            "frames_per_sequence" => {
                frames_per_sequence = next()?.parse().map_err(|e| perr(format!("{e}")))?
            }
            "resolution" => {
                resolution = (
                    next()?.parse().map_err(|e| perr(format!("{e}")))?,
                    next()?.parse().map_err(|e| perr(format!("{e}")))?,
                )
            }
            "motion_smoothness" => {
                motion_smoothness = next()?.parse().map_err(|e| perr(format!("{e}")))?
            }
            "appearance_seed_space" => {
                appearance_seed_space = next()?.parse().map_err(|e| perr(format!("{e}")))?
            }
            "limb_length" => {
                let i: usize = next()?.parse().map_err(|e| perr(format!("{e}")))?;
                limb_lengths[i] = next()?.parse().map_err(|e| perr(format!("{e}")))?;
            }
            "angle_range" => {
                let i: usize = next()?.parse().map_err(|e| perr(format!("{e}")))?;
                angle_ranges[i] = (
                    next()?.parse().map_err(|e| perr(format!("{e}")))?,
                    next()?.parse().map_err(|e| perr(format!("{e}")))?,
                );
            }
            "spec_hash" => {}
            other => return Err(perr(format!("unknown meta tag `{other}`"))),
        }
    }
    let spec = SyntheticFigureSpec {
        edges,
        limb_lengths,
        joint_angle_ranges: angle_ranges,
        appearance_seed_space,
        motion_smoothness,
    };
    spec.validate()?;
    let (h, w) = resolution;
    let mut seqs = Vec::with_capacity(sequences);
    for si in 0..sequences {
        let dir = root.join(format!("seq_{si:04}"));
        let keypoints = load_keypoint_samples(&dir.join("keypoints.kpts"))?;
        let mut frames = Vec::with_capacity(frames_per_sequence);
        for fi in 0..frames_per_sequence {
            frames.push(read_planar_png(&dir.join(format!("frame_{fi:04}.png")), h, w)?);
        }
        let smeta = std::fs::read_to_string(dir.join("meta"))?;
        let appearance_seed = smeta
            .lines()
            .find_map(|l| l.strip_prefix("appearance_seed "))
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        seqs.push(Sequence {
            frames,
            keypoints,
            appearance_seed,
        });
    }
    Ok(SyntheticDataset {
        spec,
        resolution,
        seed,
        sequences: seqs,
    })
}

/// Channel-planar RGB bytes to an interleaved PNG.
pub fn write_planar_png(path: &Path, planes: &[u8], h: usize, w: usize) -> Result<()> {
    let mut interleaved = vec![0u8; 3 * h * w];
    for px in 0..h * w {
        interleaved[3 * px] = planes[px];
        interleaved[3 * px + 1] = planes[h * w + px];
        interleaved[3 * px + 2] = planes[2 * h * w + px];
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, interleaved)
        .expect("buffer sized to dimensions");
    img.save(path)?;
    Ok(())
}

fn read_planar_png(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = image::open(path)?.into_rgb8();
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!(
                "expected {w}x{h} frame, got {}x{}",
                img.width(),
                img.height()
            ),
        });
    }
    let raw = img.into_raw();
    let mut planes = vec![0u8; 3 * h * w];
    for px in 0..h * w {
        planes[px] = raw[3 * px];
        planes[h * w + px] = raw[3 * px + 1];
        planes[2 * h * w + px] = raw[3 * px + 2];
    }
    Ok(planes)
}

/// Export the prior poses as one standalone keypoint sample file, usable
/// without the image data.
pub fn export_prior(
    dataset: &SyntheticDataset,
    split: &super::DatasetSplit,
    path: &Path,
    limit: Option<usize>,
) -> Result<usize> {
    let mut samples = Vec::new();
    'outer: for &s in &split.prior_half {
        for kp in &dataset.sequences[s].keypoints {
            samples.push(kp.clone());
            if let Some(l) = limit {
                if samples.len() == l {
                    break 'outer;
                }
            }
        }
    }
    if let Some(l) = limit {
        if samples.len() < l {
            return Err(Error::Config(format!(
                "prior export limit {l} exceeds available prior size {}",
                samples.len()
            )));
        }
    }
    save_keypoint_samples(&samples, path)?;
    Ok(samples.len())
}
