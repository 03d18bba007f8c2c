//! Synthetic articulated-figure sequences with exact keypoint ground truth.
//!
//! Each sequence fixes an appearance (limb hues, texture, background
//! pattern) and animates the pose through smooth random joint-angle
//! trajectories, the same structure as short video clips of one subject.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::{EdgeSet, KeypointSet};

/// Everything that defines the synthetic figure family.
#[derive(Debug, Clone)]
pub struct SyntheticFigureSpec {
    pub edges: EdgeSet,
    /// One length per edge, in normalized units.
    pub limb_lengths: Vec<f64>,
    /// One `(min, max)` radian range per keypoint: the root entry bounds the
    /// global body orientation, every other entry bounds that joint's angle
    /// relative to its parent limb.
    pub joint_angle_ranges: Vec<(f64, f64)>,
    /// Appearance seeds are drawn from `[0, appearance_seed_space)`.
    pub appearance_seed_space: u64,
    /// Time constant of the joint trajectories; larger is slower. Infinity
    /// freezes the figure.
    pub motion_smoothness: f64,
}

impl SyntheticFigureSpec {
    /// The default 8-keypoint figure: head, neck (root), two elbows, two
    /// hands and two feet, seven limbs, three symmetric pairs.
    pub fn default_figure() -> Self {
        let edges = EdgeSet::new(
            "figure8",
            8,
            vec![(0, 1), (1, 2), (2, 4), (1, 3), (3, 5), (1, 6), (1, 7)],
            vec![(2, 3), (4, 5), (6, 7)],
        )
        .expect("default topology is valid");
        let limb_lengths = vec![0.18, 0.22, 0.20, 0.22, 0.20, 0.42, 0.42];
        use std::f64::consts::PI;
        let joint_angle_ranges = vec![
            (-0.35, 0.35),            // head relative to body axis
            (-0.30, 0.30),            // neck = root: body orientation
            (-1.60, -0.60),           // left elbow off the body axis
            (0.60, 1.60),             // right elbow
            (-1.10, 0.25),            // left hand relative to upper arm
            (-0.25, 1.10),            // right hand
            (PI + 0.10, PI + 0.55),   // left foot
            (PI - 0.55, PI - 0.10),   // right foot
        ];
        Self {
            edges,
            limb_lengths,
            joint_angle_ranges,
            appearance_seed_space: 1 << 20,
            motion_smoothness: 12.0,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.edges.num_keypoints()
    }

    pub fn validate(&self) -> Result<()> {
        if self.limb_lengths.len() != self.edges.edges().len() {
            return Err(Error::Config(format!(
                "expected {} limb lengths, got {}",
                self.edges.edges().len(),
                self.limb_lengths.len()
            )));
        }
        if self.limb_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("limb lengths must be positive".into()));
        }
        if self.joint_angle_ranges.len() != self.num_keypoints() {
            return Err(Error::Config(format!(
                "expected {} joint angle ranges, got {}",
                self.num_keypoints(),
                self.joint_angle_ranges.len()
            )));
        }
        if self.joint_angle_ranges.iter().any(|&(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config("joint angle ranges must be nonempty".into()));
        }
        if self.appearance_seed_space == 0 {
            return Err(Error::Config("appearance_seed_space must be nonzero".into()));
        }
        if !(self.motion_smoothness > 0.0) {
            return Err(Error::Config("motion_smoothness must be positive".into()));
        }
        // The kinematic tree must reach every keypoint.
        let (_, order) = kinematic_tree(&self.edges);
        if order.len() != self.num_keypoints() {
            return Err(Error::Config(
                "skeleton edges must form a connected tree over the keypoints".into(),
            ));
        }
        Ok(())
    }

    /// Stable content hash over every spec field (used in dataset metadata).
    pub fn content_hash(&self) -> u64 {
        let mut text = String::new();
        text.push_str(&format!("K={}", self.num_keypoints()));
        for (i, j) in self.edges.edges() {
            text.push_str(&format!(";e{i}-{j}"));
        }
        for (l, r) in self.edges.symmetric_pairs() {
            text.push_str(&format!(";s{l}-{r}"));
        }
        for l in &self.limb_lengths {
            text.push_str(&format!(";l{l:.6}"));
        }
        for (a, b) in &self.joint_angle_ranges {
            text.push_str(&format!(";a{a:.6},{b:.6}"));
        }
        text.push_str(&format!(
            ";sp{};ms{:.6}",
            self.appearance_seed_space, self.motion_smoothness
        ));
        fnv1a64(text.as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parent of each keypoint (root maps to itself) plus a traversal order.
/// The root is the highest-degree keypoint, lowest index on ties.
fn kinematic_tree(edges: &EdgeSet) -> (Vec<(usize, usize)>, Vec<usize>) {
    let k = edges.num_keypoints();
    let mut degree = vec![0usize; k];
    for &(i, j) in edges.edges() {
        degree[i] += 1;
        degree[j] += 1;
    }
    let root = (0..k).max_by_key(|&i| (degree[i], usize::MAX - i)).unwrap_or(0);
    // parent[i] = (parent joint, edge index)
    let mut parent = vec![(usize::MAX, usize::MAX); k];
    parent[root] = (root, usize::MAX);
    let mut order = vec![root];
    let mut frontier = vec![root];
    while let Some(node) = frontier.pop() {
        for (ei, &(a, b)) in edges.edges().iter().enumerate() {
            for (from, to) in [(a, b), (b, a)] {
                if from == node && parent[to].0 == usize::MAX {
                    parent[to] = (node, ei);
                    order.push(to);
                    frontier.push(to);
                }
            }
        }
    }
    order.retain(|&n| parent[n].0 != usize::MAX);
    (parent, order)
}

/// Smooth bounded trajectory in `[-1, 1]`: a small fixed Fourier series
/// evaluated at `t / smoothness`.
struct SmoothTrack {
    amp: [f64; 3],
    freq: [f64; 3],
    phase: [f64; 3],
    norm: f64,
}

impl SmoothTrack {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut amp = [0.0; 3];
        let mut freq = [0.0; 3];
        let mut phase = [0.0; 3];
        for k in 0..3 {
            amp[k] = rng.gen_range(0.4..1.0);
            freq[k] = (k + 1) as f64 * rng.gen_range(0.5..1.5);
            phase[k] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        let norm = amp.iter().sum();
        Self { amp, freq, phase, norm }
    }

    fn at(&self, tau: f64) -> f64 {
        let mut v = 0.0;
        for k in 0..3 {
            v += self.amp[k] * (self.freq[k] * tau + self.phase[k]).sin();
        }
        v / self.norm
    }
}

/// Per-sequence appearance: limb colors and texture, background pattern.
#[derive(Debug, Clone)]
pub(crate) struct Appearance {
    /// Per-edge (hue, saturation, value).
    pub limb_hsv: Vec<(f64, f64, f64)>,
    /// Per-edge half-width in normalized units.
    pub limb_width: Vec<f64>,
    /// Per-edge stripe texture: (amplitude, frequency, phase).
    pub limb_texture: Vec<(f64, f64, f64)>,
    /// Background plaid: base gray, amplitude, frequencies and phases.
    pub bg: (f64, f64, f64, f64, f64, f64),
}

pub(crate) fn appearance_params(spec: &SyntheticFigureSpec, appearance_seed: u64) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(appearance_seed ^ 0xa11ce5);
    let n = spec.edges.edges().len();
    let base_hue: f64 = rng.gen_range(0.0..1.0);
    let mut limb_hsv = Vec::with_capacity(n);
    let mut limb_width = Vec::with_capacity(n);
    let mut limb_texture = Vec::with_capacity(n);
    for e in 0..n {
        // Golden-ratio hue spacing keeps limbs separable for any edge count.
        let hue = (base_hue + e as f64 * 0.61803398875).fract();
        limb_hsv.push((hue, rng.gen_range(0.75..1.0), rng.gen_range(0.8..1.0)));
        limb_width.push(rng.gen_range(0.045..0.065));
        limb_texture.push((
            rng.gen_range(0.0..0.22),
            rng.gen_range(40.0..90.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ));
    }
    let bg = (
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.05..0.16),
        rng.gen_range(4.0..9.0),
        rng.gen_range(4.0..9.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    Appearance {
        limb_hsv,
        limb_width,
        limb_texture,
        bg,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub(crate) fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// One animated figure: per-frame keypoints from forward kinematics.
struct FigureAnimation {
    parent: Vec<(usize, usize)>,
    order: Vec<usize>,
    root: usize,
    tracks: Vec<SmoothTrack>,
    root_track: (SmoothTrack, SmoothTrack),
}

impl FigureAnimation {
    fn new(spec: &SyntheticFigureSpec, rng: &mut ChaCha8Rng) -> Self {
        let (parent, order) = kinematic_tree(&spec.edges);
        let root = order[0];
        let tracks = (0..spec.num_keypoints()).map(|_| SmoothTrack::new(rng)).collect();
        let root_track = (SmoothTrack::new(rng), SmoothTrack::new(rng));
        Self {
            parent,
            order,
            root,
            tracks,
            root_track,
        }
    }

    fn keypoints_at(&self, spec: &SyntheticFigureSpec, t: f64) -> KeypointSet {
        let tau = if spec.motion_smoothness.is_infinite() {
            0.0
        } else {
            t / spec.motion_smoothness
        };
        let k = spec.num_keypoints();
        let mut pos = vec![[0.0f64; 2]; k];
        let mut dir_angle = vec![0.0f64; k];
        pos[self.root] = [0.30 * self.root_track.0.at(tau), 0.18 * self.root_track.1.at(tau)];
        let (blo, bhi) = spec.joint_angle_ranges[self.root];
        let body = 0.5 * (blo + bhi) + 0.5 * (bhi - blo) * self.tracks[self.root].at(tau);
        dir_angle[self.root] = body;
        for &joint in self.order.iter().skip(1) {
            let (par, edge_idx) = self.parent[joint];
            let (lo, hi) = spec.joint_angle_ranges[joint];
            let a = 0.5 * (lo + hi) + 0.5 * (hi - lo) * self.tracks[joint].at(tau);
            // Children of the root articulate off the body axis; deeper
            // joints articulate off their parent limb direction.
            let base = if par == self.root { dir_angle[self.root] } else { dir_angle[par] };
            let phi = base + a;
            let len = spec.limb_lengths[edge_idx];
            pos[joint] = [
                pos[par][0] + len * phi.sin(),
                pos[par][1] - len * phi.cos(),
            ];
            dir_angle[joint] = phi;
        }
        KeypointSet::new(pos).expect("kinematics produce finite coordinates")
    }
}

/// Rasterize one frame: textured capsule limbs over a plaid background,
/// quantized to 8-bit RGB (matching the on-disk PNG representation).
pub(crate) fn render_frame(
    spec: &SyntheticFigureSpec,
    appearance: &Appearance,
    keypoints: &KeypointSet,
    resolution: (usize, usize),
) -> Vec<u8> {
    let (h, w) = resolution;
    let mut out = vec![0u8; 3 * h * w];
    let coords = keypoints.coords();
    let edges = spec.edges.edges();
    for row in 0..h {
        let uy = (2.0 * row as f64 + 1.0) / h as f64 - 1.0;
        for col in 0..w {
            let ux = (2.0 * col as f64 + 1.0) / w as f64 - 1.0;
            let mut rgb: Option<[f64; 3]> = None;
            for (ei, &(i, j)) in edges.iter().enumerate() {
                let (a, b) = (coords[i], coords[j]);
                let (r, d2) = capsule_distance([ux, uy], a, b);
                let width = appearance.limb_width[ei];
                if d2.sqrt() <= width {
                    let (hue, sat, val) = appearance.limb_hsv[ei];
                    let (amp, freq, phase) = appearance.limb_texture[ei];
                    let stripe = 0.5 + 0.5 * (freq * r + phase).sin();
                    let val = val * (1.0 - amp + amp * stripe);
                    rgb = Some(hsv_to_rgb(hue, sat, val));
                    break; // painter's order: first edge wins
                }
            }
            let rgb = rgb.unwrap_or_else(|| {
                let (base, amp, f1, f2, p1, p2) = appearance.bg;
                let v = base + amp * (f1 * ux + p1).sin() * (f2 * uy + p2).sin();
                [v, v * 0.97, v * 1.03]
            });
            for (c, &v) in rgb.iter().enumerate() {
                out[c * h * w + row * w + col] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// `(r, d^2)` where `r` is the arc-length position of the closest point.
fn capsule_distance(u: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let e = [b[0] - a[0], b[1] - a[1]];
    let w = [u[0] - a[0], u[1] - a[1]];
    let ee = e[0] * e[0] + e[1] * e[1];
    let t = if ee > 0.0 {
        ((w[0] * e[0] + w[1] * e[1]) / ee).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = w[0] - t * e[0];
    let dy = w[1] - t * e[1];
    (t * ee.sqrt(), dx * dx + dy * dy)
}

/// A rendered sequence: 8-bit RGB frames (channel-planar) plus exact
/// keypoints, under one appearance.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Vec<u8>>,
    pub keypoints: Vec<KeypointSet>,
    pub appearance_seed: u64,
}

/// Deterministically render `length` frames of one figure.
pub fn generate_sequence(
    spec: &SyntheticFigureSpec,
    seed: u64,
    length: usize,
    resolution: (usize, usize),
) -> Result<Sequence> {
    spec.validate()?;
    if length < 2 {
        return Err(Error::Config(format!(
            "sequence length must be at least 2, got {length}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let appearance_seed = rng.gen_range(0..spec.appearance_seed_space);
    let appearance = appearance_params(spec, appearance_seed);
    let animation = FigureAnimation::new(spec, &mut rng);
    let mut frames = Vec::with_capacity(length);
    let mut keypoints = Vec::with_capacity(length);
    for t in 0..length {
        let kp = animation.keypoints_at(spec, t as f64);
        frames.push(render_frame(spec, &appearance, &kp, resolution));
        keypoints.push(kp);
    }
    Ok(Sequence {
        frames,
        keypoints,
        appearance_seed,
    })
}
