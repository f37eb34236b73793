//! Binary checkpoint: magic, format version, a JSON manifest, then every
//! array as little-endian f64 in manifest order.

use std::io::{ErrorKind, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, BestTracker, CarlConfig, TrainState};
use crate::error::{CarlError, Result};
use crate::mccl::MomentumState;
use crate::params::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CARL";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["online", "target", "adam_m", "adam_v"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: CarlConfig,
    k: usize,
    total: usize,
    seed: u64,
    adam_t: u64,
    momentum: MomentumState,
    best: Option<BestTracker>,
    arrays: Vec<ArrayEntry>,
}

fn groups(state: &TrainState) -> [&ParamSet; 4] {
    [&state.online, &state.target, &state.adam.m, &state.adam.v]
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (prefix, set) in GROUPS.iter().zip(groups(state)) {
        for p in set.iter() {
            arrays.push(ArrayEntry {
                name: format!("{prefix}/{}", p.name),
                shape: p.shape.clone(),
            });
            payload.extend(p.data.iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let manifest = Manifest {
        config: state.config.clone(),
        k: state.k,
        total: state.total,
        seed: state.seed,
        adam_t: state.adam.t,
        momentum: state.momentum,
        best: state.best,
        arrays,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CarlError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let mut f = std::fs::File::create(path).map_err(|e| CarlError::io(path, e))?;
    f.write_all(&out).map_err(|e| CarlError::io(path, e))
}

fn truncated(path: &Path) -> CarlError {
    CarlError::io(path, std::io::Error::new(ErrorKind::UnexpectedEof, "checkpoint is truncated"))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| truncated(path))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| CarlError::io(path, e))?;
    let mut pos = 0;
    let magic = take(&bytes, &mut pos, 4, path)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CarlError::Format(format!("{} is not a CARL checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4, path)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CarlError::Format(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(take(&bytes, &mut pos, 8, path)?.try_into().expect("8 bytes"));
    let json = take(&bytes, &mut pos, usize::try_from(len).map_err(|_| truncated(path))?, path)?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CarlError::Format(format!("manifest: {e}")))?;

    let mut sets: [ParamSet; 4] = Default::default();
    for entry in &manifest.arrays {
        let (prefix, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| CarlError::Format(format!("array name `{}` has no group", entry.name)))?;
        let slot = GROUPS
            .iter()
            .position(|g| *g == prefix)
            .ok_or_else(|| CarlError::Format(format!("unknown array group `{prefix}`")))?;
        let n: usize = entry.shape.iter().product();
        let raw = take(&bytes, &mut pos, n.checked_mul(8).ok_or_else(|| truncated(path))?, path)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sets[slot]
            .insert(name, &entry.shape, data)
            .map_err(|e| CarlError::Format(e.to_string()))?;
    }
    if pos != bytes.len() {
        return Err(CarlError::Format(format!("{} trailing bytes after the last array", bytes.len() - pos)));
    }
    let [online, target, m, v] = sets;
    for (name, set) in [("target", &target), ("adam_m", &m), ("adam_v", &v)] {
        if set.iter().any(|p| online.get(&p.name).is_none_or(|o| o.shape != p.shape)) {
            return Err(CarlError::Format(format!("{name} arrays do not match the online parameters")));
        }
    }
    if m.len() != online.len() || v.len() != online.len() {
        return Err(CarlError::Format("optimizer moments do not cover every parameter".into()));
    }
    let state = TrainState {
        config: manifest.config,
        online,
        target,
        adam: AdamState { m, v, t: manifest.adam_t },
        k: manifest.k,
        total: manifest.total,
        momentum: manifest.momentum,
        seed: manifest.seed,
        best: manifest.best,
    };
    state.config.validate().map_err(|e| CarlError::Format(format!("stored config: {e}")))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn state() -> TrainState {
        let mut cfg = CarlConfig::default();
        cfg.encoder = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 6,
            d_proj: 4,
            ..EncoderConfig::default()
        };
        let mut s = TrainState::new(cfg, 10).unwrap();
        s.k = 3;
        s.adam.t = 3;
        s.best = Some(BestTracker { metric: 0.1 + 0.2, step: 2 });
        for p in s.adam.v.iter_mut() {
            p.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sqrt() / 7.0);
        }
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, s);
        for (a, b) in s.online.flatten().iter().zip(back.online.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&state(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CarlError::Format(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CarlError::Format(_))));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CarlError::Io { .. })));
        std::fs::write(&path, &good[..2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CarlError::Io { .. })));
    }
}
