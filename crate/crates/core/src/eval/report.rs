//! Checkpoint evaluation: dense inference over a manifest's labelled
//! cases, per-case metrics, and a summary CSV.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::infer::dense_infer;
use crate::eval::metrics::{metrics_csv, score_case, summarize, CaseMetrics, SegMetrics};
use crate::net::{Segmenter, SegmenterSpec};
use crate::runfile;
use crate::sampling::load_dataset;
use crate::tensor::checkpoint;

/// The training run file sitting next to a checkpoint directory, if any.
/// Lets `eval`/`probe` run on just a checkpoint path.
pub(crate) fn sibling_run_value(checkpoint: &Path) -> Option<serde_json::Value> {
    let path = checkpoint.parent()?.join("run.json");
    if !path.is_file() {
        return None;
    }
    runfile::load_config::<serde_json::Value>(&path).ok()
}

pub(crate) fn field_from<T: DeserializeOwned>(value: &serde_json::Value, field: &str) -> Option<T> {
    let v = value.get(field)?;
    if v.is_null() {
        return None;
    }
    serde_json::from_value(v.clone()).ok()
}

pub(crate) fn canonical(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p.display().to_string(), e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub seg_spec_path: Option<PathBuf>,
    pub seg_spec: Option<SegmenterSpec>,
    pub tile_extent: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: PathBuf::new(),
            manifest: PathBuf::new(),
            seg_spec_path: None,
            seg_spec: None,
            tile_extent: 24,
        }
    }
}

impl EvalConfig {
    /// Inline a referenced spec file, falling back to the `run.json` next
    /// to the checkpoint, and absolutize paths.
    pub fn resolve(&self) -> Result<EvalConfig> {
        let mut out = self.clone();
        if let Some(path) = out.seg_spec_path.take() {
            if out.seg_spec.is_some() {
                return Err(Error::InvalidConfig(
                    "both seg_spec and seg_spec_path given".into(),
                ));
            }
            out.seg_spec = Some(runfile::load_config(&path)?);
        }
        out.checkpoint = canonical(&out.checkpoint)?;
        out.manifest = canonical(&out.manifest)?;
        if out.seg_spec.is_none() {
            out.seg_spec =
                sibling_run_value(&out.checkpoint).and_then(|v| field_from(&v, "seg_spec"));
        }
        if out.seg_spec.is_none() {
            return Err(Error::InvalidConfig(
                "no segmenter spec: set seg_spec (or seg_spec_path), or keep the \
                 training run.json next to the checkpoint directory"
                    .into(),
            ));
        }
        if out.tile_extent == 0 {
            return Err(Error::InvalidConfig("tile_extent must be >= 1".into()));
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct EvalOutput {
    pub per_case: Vec<CaseMetrics>,
    pub mean: SegMetrics,
    pub std: SegMetrics,
    pub csv_path: PathBuf,
    pub run_path: PathBuf,
}

pub fn evaluate(config: &EvalConfig, out_dir: &Path) -> Result<EvalOutput> {
    let config = config.resolve()?;
    let spec = config.seg_spec.clone().expect("resolved");
    spec.validate()?;
    let ck = checkpoint::load(&config.checkpoint)?;
    let seg = Segmenter::<f32>::from_params(spec, ck.take_prefixed("seg"))?;

    let cases = load_dataset(&config.manifest)?;
    let labelled: Vec<_> = cases.iter().filter(|c| c.labels.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::Dataset(format!(
            "{} has no labelled cases to score",
            config.manifest.display()
        )));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let run_path = out_dir.join("run.json");
    runfile::save_run(&run_path, "eval", &config)?;

    let mut per_case = Vec::with_capacity(labelled.len());
    for case in labelled {
        let pred = dense_infer(&seg, &case.image, config.tile_extent)?;
        per_case.push(score_case(
            &case.case_id,
            &pred,
            case.labels.as_ref().expect("labelled"),
            case.mask.as_ref(),
        )?);
    }
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, metrics_csv(&per_case))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let (mean, std) = summarize(&per_case);
    Ok(EvalOutput { per_case, mean, std, csv_path, run_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DiscriminatorSpec, LayerSpec};
    use crate::synth::{gen_dataset, SynthConfig};
    use crate::train::{train, TrainConfig, TrainMode, TrainSchedule};

    fn tiny_run(dir: &Path) -> (PathBuf, PathBuf) {
        let data_cfg =
            SynthConfig { extent: 25, source_cases: 2, target_cases: 2, ..SynthConfig::default() };
        let manifest = gen_dataset(&data_cfg, &dir.join("data")).unwrap();
        let config = TrainConfig {
            mode: TrainMode::Uda,
            manifest: manifest.clone(),
            seg_spec: Some(SegmenterSpec {
                in_channels: 2,
                classes: 2,
                pathway_layers: vec![LayerSpec::new(2, 3), LayerSpec::new(2, 3)],
                downsample_factor: 3,
                hidden_layers: vec![LayerSpec::new(3, 1)],
                activation_slope: 0.01,
                normal_input_extent: 13,
                low_input_extent: 7,
                ..SegmenterSpec::default()
            }),
            disc_spec: Some(DiscriminatorSpec {
                conv_layers: vec![LayerSpec::new(4, 3); 4],
                ..DiscriminatorSpec::default()
            }),
            schedule: TrainSchedule {
                e1: 1,
                e2: 2,
                refine_start: 2,
                total_epochs: 2,
                batches_per_epoch: 1,
                n_seg: 2,
                n_adv: 2,
                ..TrainSchedule::default()
            },
            probe_samples: 0,
            val_every: 0,
            tile_extent: 25,
            ..TrainConfig::default()
        };
        let out = train(&config, &dir.join("run")).unwrap();
        (out.final_checkpoint, manifest)
    }

    #[test]
    fn eval_recovers_spec_from_sibling_run_file() {
        let dir = tempfile::tempdir().unwrap();
        let (checkpoint, manifest) = tiny_run(dir.path());
        let config = EvalConfig { checkpoint, manifest, ..EvalConfig::default() };
        let out = evaluate(&config, &dir.path().join("eval")).unwrap();
        // Every labelled case is scored; the generator labels both domains.
        assert_eq!(out.per_case.len(), 4);
        let csv = std::fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 + 2); // header, cases, mean, std
        assert!(csv.lines().last().unwrap().starts_with("std,"));
        assert!(out.run_path.exists());
        assert!((0.0..=1.0).contains(&out.mean.dsc));
    }

    #[test]
    fn eval_without_any_spec_source_names_the_remedy() {
        let dir = tempfile::tempdir().unwrap();
        let (checkpoint, manifest) = tiny_run(dir.path());
        // Orphan the checkpoint so the sibling run.json is gone.
        let orphan = dir.path().join("orphan");
        std::fs::rename(checkpoint.parent().unwrap(), &orphan).unwrap();
        let config = EvalConfig {
            checkpoint: orphan.join("checkpoint-final"),
            manifest,
            ..EvalConfig::default()
        };
        std::fs::remove_file(orphan.join("run.json")).unwrap();
        let err = evaluate(&config, &dir.path().join("eval")).unwrap_err();
        assert!(err.to_string().contains("no segmenter spec"), "{err}");
    }

    #[test]
    fn eval_rejects_unlabelled_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (checkpoint, manifest) = tiny_run(dir.path());
        // Strip every labels reference from the manifest.
        let text = std::fs::read_to_string(&manifest).unwrap();
        let mut entries: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        for e in &mut entries {
            e["labels"] = serde_json::Value::Null;
        }
        std::fs::write(&manifest, serde_json::to_string(&entries).unwrap()).unwrap();
        let config = EvalConfig { checkpoint, manifest, ..EvalConfig::default() };
        let err = evaluate(&config, &dir.path().join("eval")).unwrap_err();
        assert!(err.to_string().contains("no labelled cases"), "{err}");
    }
}
