//! On-disk volume format and dataset manifests.
//!
//! A volume is a `<name>.json` sidecar plus a `<name>.raw` blob:
//! images are little-endian `f32` with sidecar shape `[C, X, Y, Z]`,
//! label/mask maps are `u8` with sidecar shape `[X, Y, Z]`; both row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::case::{CaseRecord, Domain};
use crate::tensor::{LabelGrid, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
    pub domain: Domain,
}

fn raw_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

fn read_meta(path: &Path) -> Result<VolumeMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let meta: VolumeMeta =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if meta.order != "row-major" {
        return Err(Error::Dataset(format!(
            "{}: unsupported order '{}'",
            path.display(),
            meta.order
        )));
    }
    Ok(meta)
}

fn write_meta(path: &Path, meta: &VolumeMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn save_image(json_path: &Path, image: &Tensor<f32>, domain: Domain) -> Result<()> {
    let meta = VolumeMeta {
        shape: image.shape().to_vec(),
        dtype: "f32le".into(),
        order: "row-major".into(),
        domain,
    };
    write_meta(json_path, &meta)?;
    let mut bytes = Vec::with_capacity(image.numel() * 4);
    for &v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = raw_path(json_path);
    fs::write(&raw, bytes).map_err(|e| Error::io(raw.display().to_string(), e))
}

pub fn load_image(json_path: &Path) -> Result<(Tensor<f32>, Domain)> {
    let meta = read_meta(json_path)?;
    if meta.dtype != "f32le" {
        return Err(Error::Dataset(format!(
            "{}: expected dtype f32le, got '{}'",
            json_path.display(),
            meta.dtype
        )));
    }
    if meta.shape.len() != 4 {
        return Err(Error::Dataset(format!(
            "{}: image shape must be [C, X, Y, Z], got {:?}",
            json_path.display(),
            meta.shape
        )));
    }
    let raw = raw_path(json_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(raw.display().to_string(), e))?;
    let numel: usize = meta.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(Error::Dataset(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            raw.display(),
            numel * 4,
            meta.shape,
            bytes.len()
        )));
    }
    let data: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((Tensor::new(meta.shape, data)?, meta.domain))
}

pub fn save_labels(json_path: &Path, labels: &LabelGrid, domain: Domain) -> Result<()> {
    let meta = VolumeMeta {
        shape: labels.shape().to_vec(),
        dtype: "u8".into(),
        order: "row-major".into(),
        domain,
    };
    write_meta(json_path, &meta)?;
    let raw = raw_path(json_path);
    fs::write(&raw, labels.data()).map_err(|e| Error::io(raw.display().to_string(), e))
}

pub fn load_labels(json_path: &Path) -> Result<LabelGrid> {
    let meta = read_meta(json_path)?;
    if meta.dtype != "u8" {
        return Err(Error::Dataset(format!(
            "{}: expected dtype u8, got '{}'",
            json_path.display(),
            meta.dtype
        )));
    }
    let dims: Vec<usize> = match meta.shape.len() {
        3 => meta.shape.clone(),
        // Tolerate a leading singleton channel.
        4 if meta.shape[0] == 1 => meta.shape[1..].to_vec(),
        _ => {
            return Err(Error::Dataset(format!(
                "{}: label shape must be [X, Y, Z], got {:?}",
                json_path.display(),
                meta.shape
            )))
        }
    };
    let raw = raw_path(json_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(raw.display().to_string(), e))?;
    LabelGrid::new([dims[0], dims[1], dims[2]], bytes)
}

/// One row of a dataset manifest; paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image: String,
    pub labels: Option<String>,
    pub mask: Option<String>,
    pub domain: Domain,
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn load_case(manifest_dir: &Path, entry: &ManifestEntry) -> Result<CaseRecord> {
    let (image, domain) = load_image(&manifest_dir.join(&entry.image))?;
    if domain != entry.domain {
        return Err(Error::Dataset(format!(
            "case {}: manifest says domain {}, sidecar says {}",
            entry.case_id, entry.domain, domain
        )));
    }
    let labels = entry
        .labels
        .as_ref()
        .map(|p| load_labels(&manifest_dir.join(p)))
        .transpose()?;
    let mask = entry
        .mask
        .as_ref()
        .map(|p| load_labels(&manifest_dir.join(p)))
        .transpose()?;
    CaseRecord::new(entry.case_id.clone(), image, labels, mask, entry.domain)
}

/// Load every case of a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<CaseRecord>> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let entries = load_manifest(manifest_path)?;
    entries.iter().map(|e| load_case(dir, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.json");
        let image = Tensor::from_fn(vec![2, 3, 4, 5], |i| (i as f32).sin());
        save_image(&path, &image, Domain::Target).unwrap();
        let (back, domain) = load_image(&path).unwrap();
        assert_eq!(back, image);
        assert_eq!(domain, Domain::Target);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(meta["dtype"], "f32le");
        assert_eq!(meta["order"], "row-major");
        assert_eq!(meta["domain"], "T");
        assert_eq!(meta["shape"], serde_json::json!([2, 3, 4, 5]));
    }

    #[test]
    fn labels_roundtrip_and_reject_bad_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        let labels = LabelGrid::new([2, 2, 2], vec![0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
        save_labels(&path, &labels, Domain::Source).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
        fs::write(dir.path().join("labels.raw"), [0u8; 3]).unwrap();
        assert!(load_labels(&path).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_case_loading() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor::zeros(vec![1, 2, 2, 2]);
        let labels = LabelGrid::zeros([2, 2, 2]);
        save_image(&dir.path().join("c1.json"), &image, Domain::Source).unwrap();
        save_labels(&dir.path().join("c1_labels.json"), &labels, Domain::Source).unwrap();
        let entries = vec![ManifestEntry {
            case_id: "c1".into(),
            image: "c1.json".into(),
            labels: Some("c1_labels.json".into()),
            mask: None,
            domain: Domain::Source,
        }];
        let mpath = dir.path().join("manifest.json");
        save_manifest(&mpath, &entries).unwrap();
        let cases = load_dataset(&mpath).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].case_id, "c1");
        assert!(cases[0].labels.is_some());

        // Manifest/sidecar domain mismatch is an error.
        let bad = vec![ManifestEntry { domain: Domain::Target, ..entries[0].clone() }];
        save_manifest(&mpath, &bad).unwrap();
        assert!(load_dataset(&mpath).is_err());
    }
}
