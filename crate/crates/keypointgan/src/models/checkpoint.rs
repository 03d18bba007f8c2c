//! Checkpoint archive: a single binary file holding every parameter
//! collection, the architecture description, optimizer state, RNG state and
//! the iteration counter. Arrays round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::tensor::ArrD;

use super::{ArchConfig, GammaMode, ModelBundle};

const MAGIC: &[u8; 8] = b"KPGANCK1";

#[derive(Debug, Default)]
pub struct CheckpointData {
    pub arch_text: String,
    pub params: Vec<(String, ArrD)>,
    /// One Adam state per optimizer group: (group name, step, entries).
    pub adam_states: Vec<(String, u64, Vec<(String, ArrD, ArrD)>)>,
    /// Opaque RNG-state bytes owned by the training loop.
    pub rng_blob: Vec<u8>,
    pub iteration: u64,
    /// Free-form text sections (resolved config, prior paths, ...).
    pub extra_text: Vec<(String, String)>,
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn arr(&mut self, a: &ArrD) {
        self.u32(a.ndim() as u32);
        for &d in a.shape() {
            self.u64(d as u64);
        }
        let std = a.as_standard_layout();
        for &v in std.as_slice().unwrap() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf8 in archive".into()))
    }
    fn arr(&mut self) -> Result<ArrD> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
    }
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut w = ByteWriter(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.str(&data.arch_text);

    w.u32(data.params.len() as u32);
    for (name, arr) in &data.params {
        w.str(name);
        w.arr(arr);
    }

    w.u32(data.adam_states.len() as u32);
    for (group, step, entries) in &data.adam_states {
        w.str(group);
        w.u64(*step);
        w.u32(entries.len() as u32);
        for (name, m, v) in entries {
            w.str(name);
            w.arr(m);
            w.arr(v);
        }
    }

    w.u64(data.rng_blob.len() as u64);
    w.0.extend_from_slice(&data.rng_blob);
    w.u64(data.iteration);

    w.u32(data.extra_text.len() as u32);
    for (k, v) in &data.extra_text {
        w.str(k);
        w.str(v);
    }

    // Write atomically so an interrupted run never leaves a torn archive.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&w.0)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut r = ByteReader::new(&buf[8..]);
    let arch_text = r.str()?;

    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let arr = r.arr()?;
        params.push((name, arr));
    }

    let n_groups = r.u32()? as usize;
    let mut adam_states = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let group = r.str()?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let m = r.arr()?;
            let v = r.arr()?;
            entries.push((name, m, v));
        }
        adam_states.push((group, step, entries));
    }

    let blob_len = r.u64()? as usize;
    let rng_blob = r.take(blob_len)?.to_vec();
    let iteration = r.u64()?;

    let n_extra = r.u32()? as usize;
    let mut extra_text = Vec::with_capacity(n_extra);
    for _ in 0..n_extra {
        let k = r.str()?;
        let v = r.str()?;
        extra_text.push((k, v));
    }

    Ok(CheckpointData {
        arch_text,
        params,
        adam_states,
        rng_blob,
        iteration,
        extra_text,
    })
}

impl ArchConfig {
    pub fn to_text(&self) -> String {
        format!(
            "resolution = {}x{}\nnum_keypoints = {}\nbase_channels = {}\n\
             eta_channels = {}\ndisc_channels = {}\ngamma_mode = {}\n\
             conditional_decoder = {}\nwith_image_discriminator = {}\n",
            self.resolution.0,
            self.resolution.1,
            self.num_keypoints,
            self.base_channels,
            self.eta_channels,
            self.disc_channels,
            self.gamma_mode.as_str(),
            self.conditional_decoder,
            self.with_image_discriminator,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut arch = ArchConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad arch line `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |k: &str| Error::Checkpoint(format!("bad arch value for `{k}`"));
            match key {
                "resolution" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| bad(key))?;
                    arch.resolution = (
                        h.parse().map_err(|_| bad(key))?,
                        w.parse().map_err(|_| bad(key))?,
                    );
                }
                "num_keypoints" => arch.num_keypoints = value.parse().map_err(|_| bad(key))?,
                "base_channels" => arch.base_channels = value.parse().map_err(|_| bad(key))?,
                "eta_channels" => arch.eta_channels = value.parse().map_err(|_| bad(key))?,
                "disc_channels" => arch.disc_channels = value.parse().map_err(|_| bad(key))?,
                "gamma_mode" => arch.gamma_mode = GammaMode::parse(value)?,
                "conditional_decoder" => {
                    arch.conditional_decoder = value.parse().map_err(|_| bad(key))?
                }
                "with_image_discriminator" => {
                    arch.with_image_discriminator = value.parse().map_err(|_| bad(key))?
                }
                other => {
                    return Err(Error::Checkpoint(format!("unknown arch key `{other}`")))
                }
            }
        }
        Ok(arch)
    }
}

impl ModelBundle {
    /// Named snapshot of every parameter collection.
    pub fn export_params(&self) -> Vec<(String, ArrD)> {
        self.all_params()
            .into_iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }

    /// Restore parameters by name. The archive must cover exactly the
    /// parameters this bundle owns.
    pub fn import_params(&mut self, stored: &[(String, ArrD)]) -> Result<()> {
        if stored.iter().any(|(n, _)| n.starts_with("eta_frozen")) {
            self.restore_frozen_eta_shell();
        }
        let mut by_name: std::collections::HashMap<&str, &ArrD> =
            stored.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for p in self.all_params_mut() {
            let Some(arr) = by_name.remove(p.name.as_str()) else {
                return Err(Error::Checkpoint(format!(
                    "archive is missing parameter `{}`",
                    p.name
                )));
            };
            if arr.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in archive but {:?} in model",
                    p.name,
                    arr.shape(),
                    p.value.shape()
                )));
            }
            *p.value_mut() = arr.clone();
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Checkpoint(format!(
                "archive has unknown parameter `{name}`"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::ArrayD;

    #[test]
    fn arch_text_round_trip() {
        let arch = ArchConfig {
            resolution: (32, 48),
            num_keypoints: 5,
            base_channels: 9,
            eta_channels: 7,
            disc_channels: 6,
            gamma_mode: GammaMode::Identity,
            conditional_decoder: false,
            with_image_discriminator: true,
        };
        let back = ArchConfig::from_text(&arch.to_text()).unwrap();
        assert_eq!(arch, back);
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let arr = ArrayD::from_shape_fn(IxDyn(&[3, 2]), |ix| {
            (ix[0] as f32 + 0.1) * (ix[1] as f32 - 7.3)
        });
        let data = CheckpointData {
            arch_text: "resolution = 32x32\n".into(),
            params: vec![("a.w".into(), arr.clone())],
            adam_states: vec![("gen".into(), 42, vec![("a.w".into(), arr.clone(), arr.clone())])],
            rng_blob: vec![1, 2, 3, 4, 5],
            iteration: 1234,
            extra_text: vec![("note".into(), "hello".into())],
        };
        save(&path, &data).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.iteration, 1234);
        assert_eq!(back.rng_blob, data.rng_blob);
        assert_eq!(back.params.len(), 1);
        assert_eq!(back.params[0].0, "a.w");
        assert_eq!(back.params[0].1, arr);
        assert_eq!(back.adam_states[0].1, 42);
        assert_eq!(back.extra_text, data.extra_text);
    }

    #[test]
    fn bundle_param_round_trip_reproduces_forward_bits() {
        let arch = super::super::ArchConfig {
            resolution: (32, 32),
            num_keypoints: 3,
            base_channels: 4,
            eta_channels: 4,
            disc_channels: 4,
            ..Default::default()
        };
        let mut m1 = ModelBundle::new(arch.clone(), 7).unwrap();
        m1.freeze_eta_snapshot();
        let stored = m1.export_params();
        // Different init seed: parameters differ until imported.
        let mut m2 = ModelBundle::new(arch, 8).unwrap();
        m2.import_params(&stored).unwrap();

        let img = ArrayD::from_shape_fn(IxDyn(&[1, 1, 32, 32]), |ix| {
            ((ix[2] * 31 + ix[3]) % 17) as f32 / 17.0
        });
        let mut t1 = Tape::inference();
        let x1 = t1.constant(img.clone());
        let y1 = m1.eta_frozen_forward(&mut t1, &x1);
        let mut t2 = Tape::inference();
        let x2 = t2.constant(img);
        let y2 = m2.eta_frozen_forward(&mut t2, &x2);
        assert_eq!(y1.data.as_slice().unwrap(), y2.data.as_slice().unwrap());
    }
}
