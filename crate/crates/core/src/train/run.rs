//! The full training run: config resolution, data loading, the epoch
//! loop, metrics history, and checkpointing.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{dense_infer, probe_domain_accuracy, score_case};
use crate::net::{Discriminator, DiscriminatorSpec, Segmenter, SegmenterSpec, TapSet};
use crate::runfile;
use crate::sampling::{
    build_adv_batch, build_seg_batch, load_dataset, CaseRecord, Domain, FgIndex,
};
use crate::tensor::{checkpoint, SgdMomentum};
use crate::train::schedule::TrainSchedule;
use crate::train::step::{train_step, StepReport};

/// Experiment arm: plain supervised on source, the adversarial method, or
/// the fully-supervised upper bound on both domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    SourceOnly,
    Uda,
    SupervisedBoth,
}

impl TrainMode {
    pub fn tag(self) -> &'static str {
        match self {
            TrainMode::SourceOnly => "source-only",
            TrainMode::Uda => "uda",
            TrainMode::SupervisedBoth => "supervised-both",
        }
    }

    /// Does this mode train a discriminator?
    pub fn adversarial(self) -> bool {
        matches!(self, TrainMode::Uda)
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-only" => Ok(TrainMode::SourceOnly),
            "uda" => Ok(TrainMode::Uda),
            "supervised-both" => Ok(TrainMode::SupervisedBoth),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?} (expected source-only, uda, or supervised-both)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Training manifest; source and target cases are told apart by tag.
    pub manifest: PathBuf,
    /// Optional labelled manifest for `val_dsc` / held-out probing.
    pub val_manifest: Option<PathBuf>,
    /// Network specs, either referenced by path or inlined. `resolve()`
    /// folds the files into the inline fields so a recorded run is
    /// self-contained.
    pub seg_spec_path: Option<PathBuf>,
    pub disc_spec_path: Option<PathBuf>,
    pub seg_spec: Option<SegmenterSpec>,
    pub disc_spec: Option<DiscriminatorSpec>,
    /// Tap-set override in `L...` notation; default taps otherwise.
    pub taps: Option<String>,
    pub schedule: TrainSchedule,
    pub momentum: f64,
    pub fg_fraction: f64,
    /// Output-window extent for validation inference.
    pub tile_extent: usize,
    /// Save a checkpoint every n epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Compute `val_dsc` every n epochs (0 = final epoch only).
    pub val_every: usize,
    /// Held-out segments per epoch for `disc_acc_val` (0 = skip).
    pub probe_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Uda,
            manifest: PathBuf::new(),
            val_manifest: None,
            seg_spec_path: None,
            disc_spec_path: None,
            seg_spec: None,
            disc_spec: None,
            taps: None,
            schedule: TrainSchedule::default(),
            momentum: 0.9,
            fg_fraction: 0.5,
            tile_extent: 24,
            checkpoint_every: 0,
            val_every: 10,
            probe_samples: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fold referenced spec files into the config and absolutize paths.
    /// A resolved config re-resolves to itself, so a recorded `run.json`
    /// replays identically even if the original spec files change.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut out = self.clone();
        if let Some(path) = out.seg_spec_path.take() {
            if out.seg_spec.is_some() {
                return Err(Error::InvalidConfig(
                    "both seg_spec and seg_spec_path given".into(),
                ));
            }
            out.seg_spec = Some(runfile::load_config(&path)?);
        }
        if let Some(path) = out.disc_spec_path.take() {
            if out.disc_spec.is_some() {
                return Err(Error::InvalidConfig(
                    "both disc_spec and disc_spec_path given".into(),
                ));
            }
            out.disc_spec = Some(runfile::load_config(&path)?);
        }
        let absolutize = |p: &Path| -> Result<PathBuf> {
            std::fs::canonicalize(p).map_err(|e| Error::io(p.display().to_string(), e))
        };
        out.manifest = absolutize(&out.manifest)?;
        if let Some(v) = &out.val_manifest {
            out.val_manifest = Some(absolutize(v)?);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return fail(format!("fg_fraction must be in [0, 1], got {}", self.fg_fraction));
        }
        if self.tile_extent == 0 {
            return fail("tile_extent must be >= 1".into());
        }
        if self.probe_samples % 2 != 0 {
            return fail(format!("probe_samples must be even, got {}", self.probe_samples));
        }
        Ok(())
    }
}

/// One row of the per-epoch metrics history. `None` columns print empty.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_adv: Option<f64>,
    pub alpha: f64,
    pub lr_seg: f64,
    pub lr_adv: Option<f64>,
    pub disc_acc_train: Option<f64>,
    pub disc_acc_val: Option<f64>,
    pub val_dsc: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,L_seg,L_adv,alpha,lr_seg,lr_adv,disc_acc_train,disc_acc_val,val_dsc";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn history_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6},{},{},{},{}\n",
            r.epoch,
            r.l_seg,
            fmt_opt(r.l_adv),
            r.alpha,
            r.lr_seg,
            fmt_opt(r.lr_adv),
            fmt_opt(r.disc_acc_train),
            fmt_opt(r.disc_acc_val),
            fmt_opt(r.val_dsc),
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutput {
    pub history: Vec<EpochRow>,
    pub metrics_path: PathBuf,
    pub run_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

struct TrainData {
    /// Labelled cases feeding B_seg.
    seg_cases: Vec<CaseRecord>,
    source_cases: Vec<CaseRecord>,
    /// Label-stripped in uda mode.
    target_cases: Vec<CaseRecord>,
    val_cases: Vec<CaseRecord>,
}

fn require_labels(cases: &[CaseRecord], what: &str) -> Result<()> {
    for c in cases {
        if c.labels.is_none() {
            return Err(Error::Dataset(format!("{what} case {} has no labels", c.case_id)));
        }
    }
    Ok(())
}

fn load_data(config: &TrainConfig, in_channels: usize) -> Result<TrainData> {
    let cases = load_dataset(&config.manifest)?;
    for c in &cases {
        if c.image.channels() != in_channels {
            return Err(Error::Dataset(format!(
                "case {} has {} channels, segmenter expects {in_channels}",
                c.case_id,
                c.image.channels()
            )));
        }
    }
    let (source, target): (Vec<_>, Vec<_>) =
        cases.into_iter().partition(|c| c.domain == Domain::Source);
    if source.is_empty() {
        return Err(Error::EmptyDomain("source domain has no cases".into()));
    }
    require_labels(&source, "source")?;
    let (seg_cases, target_cases) = match config.mode {
        TrainMode::SourceOnly => (source.clone(), target),
        TrainMode::Uda => {
            if target.is_empty() {
                return Err(Error::EmptyDomain("target domain has no cases".into()));
            }
            // The trainer never sees target labels in this mode.
            let stripped: Vec<_> = target.into_iter().map(CaseRecord::without_labels).collect();
            (source.clone(), stripped)
        }
        TrainMode::SupervisedBoth => {
            if target.is_empty() {
                return Err(Error::EmptyDomain(
                    "target domain has no cases (supervised-both trains on both)".into(),
                ));
            }
            require_labels(&target, "target")?;
            let mut all = source.clone();
            all.extend(target.iter().cloned());
            (all, target)
        }
    };
    let val_cases = match &config.val_manifest {
        Some(path) => load_dataset(path)?,
        None => vec![],
    };
    Ok(TrainData { seg_cases, source_cases: source, target_cases, val_cases })
}

// Dedicated rng stream ids; gen_case uses the low range.
const STREAM_SEG_INIT: u64 = 1 << 40;
const STREAM_DISC_INIT: u64 = (1 << 40) + 1;
const STREAM_SEG_BATCH: u64 = (1 << 40) + 2;
const STREAM_ADV_BATCH: u64 = (1 << 40) + 3;
const STREAM_PROBE: u64 = (1 << 40) + 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    let mut config = config.resolve()?;
    config.validate()?;
    let seg_spec = config.seg_spec.clone().unwrap_or_default();
    seg_spec.validate()?;
    let taps = match &config.taps {
        Some(text) => TapSet::parse(text, &seg_spec)?,
        None => TapSet::default_for(&seg_spec),
    };
    taps.validate(&seg_spec)?;
    let disc_spec = config.disc_spec.clone().unwrap_or_default();
    disc_spec.validate()?;
    // Record the specs actually used, so the run file is self-contained
    // and downstream commands can rebuild the networks from it.
    config.seg_spec = Some(seg_spec.clone());
    if config.mode.adversarial() {
        config.disc_spec = Some(disc_spec.clone());
    }

    let data = load_data(&config, seg_spec.in_channels)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let run_path = out_dir.join("run.json");
    runfile::save_run(&run_path, "train", &config)?;

    let sched = &config.schedule;
    let geom = seg_spec.training_geometry();
    let mut seg =
        Segmenter::<f32>::init(seg_spec.clone(), &mut stream_rng(config.seed, STREAM_SEG_INIT))?;
    let mut seg_opt = SgdMomentum::new(seg.params(), config.momentum as f32);
    let mut adversary = if config.mode.adversarial() {
        let disc = Discriminator::<f32>::init(
            disc_spec.clone(),
            taps.channel_count(&seg_spec),
            &mut stream_rng(config.seed, STREAM_DISC_INIT),
        )?;
        let opt = SgdMomentum::new(disc.params(), config.momentum as f32);
        Some((disc, opt))
    } else {
        None
    };

    let fg = FgIndex::build(&data.seg_cases)?;
    let mut seg_rng = stream_rng(config.seed, STREAM_SEG_BATCH);
    let mut adv_rng = stream_rng(config.seed, STREAM_ADV_BATCH);
    let mut probe_rng = stream_rng(config.seed, STREAM_PROBE);

    // Held-out probe pool: the val split when it covers both domains,
    // otherwise the training cases.
    let val_s: Vec<_> =
        data.val_cases.iter().filter(|c| c.domain == Domain::Source).cloned().collect();
    let val_t: Vec<_> =
        data.val_cases.iter().filter(|c| c.domain == Domain::Target).cloned().collect();
    let (probe_s, probe_t): (&[CaseRecord], &[CaseRecord]) =
        if !val_s.is_empty() && !val_t.is_empty() {
            (&val_s, &val_t)
        } else {
            (&data.source_cases, &data.target_cases)
        };

    let labelled_val: Vec<&CaseRecord> =
        data.val_cases.iter().filter(|c| c.labels.is_some()).collect();

    let mut history = Vec::with_capacity(sched.total_epochs);
    for epoch in 1..=sched.total_epochs {
        let alpha = if config.mode.adversarial() { sched.alpha_at(epoch) } else { 0.0 };
        let (lr_seg, lr_disc) = sched.lr_at(epoch);
        let mut l_seg_sum = 0.0;
        let mut l_adv_sum = 0.0;
        let mut acc_sum = 0.0;
        for _ in 0..sched.batches_per_epoch {
            let mut attempt = 0;
            let report: StepReport = loop {
                let seg_batch = build_seg_batch(
                    &data.seg_cases,
                    &fg,
                    sched.n_seg,
                    config.fg_fraction,
                    geom,
                    &mut seg_rng,
                )?;
                let adv_batch = match &adversary {
                    Some(_) => {
                        let s_views: Vec<_> =
                            data.source_cases.iter().map(|c| c.image_view()).collect();
                        let t_views: Vec<_> =
                            data.target_cases.iter().map(|c| c.image_view()).collect();
                        Some(build_adv_batch(&s_views, &t_views, sched.n_adv, geom, &mut adv_rng)?)
                    }
                    None => None,
                };
                let result = train_step(
                    &mut seg,
                    &mut seg_opt,
                    adversary.as_mut().map(|(d, o)| (d, o)),
                    &taps,
                    &seg_batch,
                    adv_batch.as_ref(),
                    alpha,
                    lr_seg,
                    lr_disc,
                );
                match result {
                    Ok(r) => break r,
                    Err(e @ Error::NonFinite { .. }) if attempt == 0 => {
                        warn!("epoch {epoch}: {e}; retrying the step with fresh batches");
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            };
            l_seg_sum += report.l_seg;
            l_adv_sum += report.l_adv.unwrap_or(0.0);
            acc_sum += report.disc_acc.unwrap_or(0.0);
        }

        let steps = sched.batches_per_epoch as f64;
        let adversarial = adversary.is_some();
        let disc_acc_val = match (&adversary, config.probe_samples) {
            (Some((disc, _)), n) if n > 0 => Some(probe_domain_accuracy(
                &seg,
                disc,
                &taps,
                probe_s,
                probe_t,
                n,
                &mut probe_rng,
            )?),
            _ => None,
        };
        let val_due = epoch == sched.total_epochs
            || (config.val_every > 0 && epoch % config.val_every == 0);
        let val_dsc = if val_due && !labelled_val.is_empty() {
            let mut sum = 0.0;
            for case in &labelled_val {
                let pred = dense_infer(&seg, &case.image, config.tile_extent)?;
                let m = score_case(
                    &case.case_id,
                    &pred,
                    case.labels.as_ref().unwrap(),
                    case.mask.as_ref(),
                )?;
                sum += m.metrics.dsc;
            }
            Some(sum / labelled_val.len() as f64)
        } else {
            None
        };

        let row = EpochRow {
            epoch,
            l_seg: l_seg_sum / steps,
            l_adv: adversarial.then_some(l_adv_sum / steps),
            alpha,
            lr_seg,
            lr_adv: adversarial.then_some(lr_disc),
            disc_acc_train: adversarial.then_some(acc_sum / steps),
            disc_acc_val,
            val_dsc,
        };
        info!(
            "epoch {epoch}: L_seg {:.4} L_adv {} alpha {:.3}",
            row.l_seg,
            fmt_opt(row.l_adv),
            row.alpha
        );
        history.push(row);

        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            save_checkpoint(
                &out_dir.join(format!("checkpoint-{epoch:03}")),
                epoch,
                &config,
                &seg,
                adversary.as_ref().map(|(d, _)| d),
            )?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint-final");
    save_checkpoint(
        &final_checkpoint,
        sched.total_epochs,
        &config,
        &seg,
        adversary.as_ref().map(|(d, _)| d),
    )?;
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, history_csv(&history))
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    Ok(TrainOutput { history, metrics_path, run_path, final_checkpoint })
}

fn save_checkpoint(
    dir: &Path,
    epoch: usize,
    config: &TrainConfig,
    seg: &Segmenter<f32>,
    disc: Option<&Discriminator<f32>>,
) -> Result<()> {
    let mut entries = vec![("seg", seg.params())];
    if let Some(d) = disc {
        entries.push(("disc", d.params()));
    }
    checkpoint::save(dir, epoch, config.momentum, &entries)
}
