use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered 2D landmark coordinates in normalized `[-1, 1]` space.
///
/// The x axis runs along image columns, the y axis along rows (downwards).
/// Pixel `(row, col)` of an `H x W` grid sits at the normalized center
/// `x = (2*col + 1)/W - 1`, `y = (2*row + 1)/H - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    coords: Vec<[f64; 2]>,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Topology("keypoint set must not be empty".into()));
        }
        for (i, c) in coords.iter().enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::Topology(format!(
                    "keypoint {i} is not finite: ({}, {})",
                    c[0], c[1]
                )));
            }
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.coords
    }

    /// Euclidean distance between matching keypoints, averaged over the set.
    pub fn mean_distance(&self, other: &KeypointSet) -> f64 {
        assert_eq!(self.len(), other.len(), "keypoint count mismatch");
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / self.len() as f64
    }
}

/// Skeleton topology: undirected keypoint index pairs plus left/right
/// symmetry metadata used for orientation correction.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub name: String,
    edges: Vec<(usize, usize)>,
    symmetric_pairs: Vec<(usize, usize)>,
    num_keypoints: usize,
}

impl EdgeSet {
    pub fn new(
        name: impl Into<String>,
        num_keypoints: usize,
        edges: Vec<(usize, usize)>,
        symmetric_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let mut normalized = Vec::with_capacity(edges.len());
        for &(i, j) in &edges {
            if i == j {
                return Err(Error::Topology(format!("edge ({i}, {j}) is degenerate")));
            }
            if i >= num_keypoints || j >= num_keypoints {
                return Err(Error::Topology(format!(
                    "edge ({i}, {j}) out of range for K={num_keypoints}"
                )));
            }
            let e = (i.min(j), i.max(j));
            if normalized.contains(&e) {
                return Err(Error::Topology(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
            normalized.push(e);
        }
        let mut seen = vec![false; num_keypoints];
        for &(l, r) in &symmetric_pairs {
            if l >= num_keypoints || r >= num_keypoints || l == r {
                return Err(Error::Topology(format!("bad symmetric pair ({l}, {r})")));
            }
            if seen[l] || seen[r] {
                return Err(Error::Topology(format!(
                    "symmetric pair ({l}, {r}) reuses a keypoint"
                )));
            }
            seen[l] = true;
            seen[r] = true;
        }
        Ok(Self {
            name: name.into(),
            edges: normalized,
            symmetric_pairs,
            num_keypoints,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn symmetric_pairs(&self) -> &[(usize, usize)] {
        &self.symmetric_pairs
    }
}

/// H x W single-channel pictorial pose rendering with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonImage {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
}

impl SkeletonImage {
    pub(crate) fn from_raw(pixels: Vec<f64>, height: usize, width: usize) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        Self {
            pixels,
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn max_pixel(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }
}

/// Write a topology file: `K <int>`, then `edge <i> <j>` and `sym <l> <r>` lines.
pub fn save_topology(edges: &EdgeSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "K {}", edges.num_keypoints()).unwrap();
    for (i, j) in edges.edges() {
        writeln!(out, "edge {i} {j}").unwrap();
    }
    for (l, r) in edges.symmetric_pairs() {
        writeln!(out, "sym {l} {r}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a topology file written by [`save_topology`].
pub fn load_topology(path: &Path) -> Result<EdgeSet> {
    let text = std::fs::read_to_string(path)?;
    let perr = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| perr("empty file".into()))?;
    let mut parts = header.split_whitespace();
    let k = match (parts.next(), parts.next()) {
        (Some("K"), Some(v)) => v
            .parse::<usize>()
            .map_err(|e| perr(format!("bad K value: {e}")))?,
        _ => return Err(perr(format!("expected `K <int>` header, got `{header}`"))),
    };
    let mut edges = Vec::new();
    let mut sym = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let a: usize = parts
            .next()
            .ok_or_else(|| perr(format!("missing index in `{line}`")))?
            .parse()
            .map_err(|e| perr(format!("bad index in `{line}`: {e}")))?;
        let b: usize = parts
            .next()
            .ok_or_else(|| perr(format!("missing index in `{line}`")))?
            .parse()
            .map_err(|e| perr(format!("bad index in `{line}`: {e}")))?;
        match tag {
            "edge" => edges.push((a, b)),
            "sym" => sym.push((a, b)),
            other => return Err(perr(format!("unknown line tag `{other}`"))),
        }
    }
    EdgeSet::new(
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        k,
        edges,
        sym,
    )
}

/// Write a keypoint sample file: `S <int> K <int>` then `S*K` lines of `x y`.
pub fn save_keypoint_samples(samples: &[KeypointSet], path: &Path) -> Result<()> {
    let k = samples.first().map(|s| s.len()).unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "S {} K {}", samples.len(), k).unwrap();
    for s in samples {
        assert_eq!(s.len(), k, "inconsistent K across samples");
        for c in s.coords() {
            writeln!(out, "{} {}", c[0], c[1]).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a keypoint sample file written by [`save_keypoint_samples`].
pub fn load_keypoint_samples(path: &Path) -> Result<Vec<KeypointSet>> {
    let text = std::fs::read_to_string(path)?;
    let perr = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| perr("empty file".into()))?;
    let mut parts = header.split_whitespace();
    let (s, k) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("S"), Some(s), Some("K"), Some(k)) => (
            s.parse::<usize>()
                .map_err(|e| perr(format!("bad S value: {e}")))?,
            k.parse::<usize>()
                .map_err(|e| perr(format!("bad K value: {e}")))?,
        ),
        _ => {
            return Err(perr(format!(
                "expected `S <int> K <int>` header, got `{header}`"
            )))
        }
    };
    let mut samples = Vec::with_capacity(s);
    for si in 0..s {
        let mut coords = Vec::with_capacity(k);
        for ki in 0..k {
            let line = lines
                .next()
                .ok_or_else(|| perr(format!("missing coordinate line {ki} of sample {si}")))?;
            let mut parts = line.split_whitespace();
            let x: f64 = parts
                .next()
                .ok_or_else(|| perr(format!("missing x in `{line}`")))?
                .parse()
                .map_err(|e| perr(format!("bad x in `{line}`: {e}")))?;
            let y: f64 = parts
                .next()
                .ok_or_else(|| perr(format!("missing y in `{line}`")))?
                .parse()
                .map_err(|e| perr(format!("bad y in `{line}`: {e}")))?;
            coords.push([x, y]);
        }
        samples.push(KeypointSet::new(coords).map_err(|e| perr(e.to_string()))?);
    }
    Ok(samples)
}
