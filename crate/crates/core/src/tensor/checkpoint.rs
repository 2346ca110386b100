//! Checkpoint directory format.
//!
//! A checkpoint is a directory with a `manifest.json` plus one raw
//! little-endian `f32` blob per parameter, named after the parameter
//! (e.g. `seg.path_norm.layer3.kernels.bin`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    epoch: usize,
    momentum: f64,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// Loaded checkpoint contents. Parameter names keep their network prefix
/// (`seg.` / `disc.`).
#[derive(Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub momentum: f64,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    /// Split out the parameters under `prefix` (e.g. `"seg"`), names stripped.
    pub fn take_prefixed(&self, prefix: &str) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        let full = format!("{prefix}.");
        for (name, value) in self.params.iter() {
            if let Some(rest) = name.strip_prefix(&full) {
                out.add(rest, value.clone());
            }
        }
        out
    }
}

/// Save one or more prefixed parameter sets as a checkpoint directory.
pub fn save(
    dir: &Path,
    epoch: usize,
    momentum: f64,
    nets: &[(&str, &ParamSet<f32>)],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut metas = Vec::new();
    for (prefix, params) in nets {
        for (name, value) in params.iter() {
            let full = format!("{prefix}.{name}");
            let path = dir.join(format!("{full}.bin"));
            let mut bytes = Vec::with_capacity(value.numel() * 4);
            for &v in value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
            metas.push(ParamMeta { name: full, shape: value.shape().to_vec() });
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        epoch,
        momentum,
        params: metas,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(mpath.display().to_string(), e))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut params = ParamSet::new();
    for meta in &manifest.params {
        let path = dir.join(format!("{}.bin", meta.name));
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let numel: usize = meta.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} bytes for shape {:?}, found {}",
                path.display(),
                numel * 4,
                meta.shape,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.add(meta.name.clone(), Tensor::new(meta.shape.clone(), data)?);
    }
    Ok(Checkpoint { epoch: manifest.epoch, momentum: manifest.momentum, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.add("layer1.kernels", Tensor::from_fn(vec![2, 1, 3, 3, 3], |i| i as f32 * 0.25 - 3.0));
        p.add("layer1.bias", Tensor::new(vec![2], vec![0.5, -0.125]).unwrap());
        p
    }

    #[test]
    fn roundtrip_preserves_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let seg = sample_params();
        let mut disc = ParamSet::new();
        disc.add("layer1.kernels", Tensor::full(vec![1, 1, 3, 3, 3], 0.75f32));
        save(dir.path(), 42, 0.9, &[("seg", &seg), ("disc", &disc)]).unwrap();

        assert!(dir.path().join("seg.layer1.kernels.bin").exists());
        assert!(dir.path().join("disc.layer1.kernels.bin").exists());

        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.epoch, 42);
        assert_eq!(ck.momentum, 0.9);
        let seg2 = ck.take_prefixed("seg");
        assert_eq!(seg2.len(), 2);
        for id in 0..seg.len() {
            assert_eq!(seg.name(id), seg2.name(id));
            assert_eq!(seg.get(id).data(), seg2.get(id).data());
        }
    }

    #[test]
    fn blob_with_wrong_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seg = sample_params();
        save(dir.path(), 0, 0.9, &[("seg", &seg)]).unwrap();
        std::fs::write(dir.path().join("seg.layer1.bias.bin"), [0u8; 5]).unwrap();
        match load(dir.path()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("expected 8 bytes")),
            other => panic!("expected checkpoint error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn manifest_records_format_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), 7, 0.9, &[("seg", &sample_params())]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["epoch"], 7);
        assert_eq!(v["momentum"], 0.9);
        assert_eq!(v["params"][0]["name"], "seg.layer1.kernels");
        assert_eq!(v["params"][0]["shape"], serde_json::json!([2, 1, 3, 3, 3]));
    }
}
