//! Discriminator accuracy on held-out segments as a divergence proxy.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::report::{canonical, field_from, sibling_run_value};
use crate::net::{
    domain_prediction, Discriminator, DiscriminatorSpec, Segmenter, SegmenterSpec, TapSet,
};
use crate::runfile;
use crate::sampling::{build_adv_batch, load_dataset, CaseRecord, Domain, SegBatch};
use crate::tensor::{checkpoint, Element, GradStore, SgdMomentum, Tape};
use crate::train::accumulate_step;

/// How accurately the discriminator tells domains apart on fresh segments
/// routed through the frozen segmenter's tapped features. 0.5 is chance;
/// high accuracy means the feature distributions remain separable.
///
/// Draws `n_samples` balanced segments (must be even and positive) in
/// batches, so the stream of centers matches the training-time sampler.
pub fn probe_domain_accuracy<E: Element>(
    seg: &Segmenter<E>,
    disc: &Discriminator<E>,
    taps: &TapSet,
    source: &[CaseRecord],
    target: &[CaseRecord],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_samples == 0 || n_samples % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "probe needs an even, positive sample count; got {n_samples}"
        )));
    }
    let source_views: Vec<_> = source.iter().map(|c| c.image_view()).collect();
    let target_views: Vec<_> = target.iter().map(|c| c.image_view()).collect();
    let geom = seg.spec().training_geometry();
    let mut correct = 0u64;
    let mut remaining = n_samples;
    while remaining > 0 {
        let b = remaining.min(20);
        remaining -= b;
        let batch = build_adv_batch(&source_views, &target_views, b, geom, rng)?;
        for s in &batch.samples {
            let mut tape = Tape::new();
            let bound = seg.bind(&mut tape)?;
            let fwd = bound.forward(&mut tape, &s.normal.cast(), &s.low.cast(), taps)?;
            let features = fwd.features(&mut tape)?;
            let logits = disc.bind(&mut tape)?.forward(&mut tape, features)?;
            let pred = domain_prediction(tape.value(logits));
            if pred == s.domain.label() as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n_samples as f64)
}

/// Budget for training a replacement discriminator on the frozen
/// segmenter's features — the stricter divergence reading, and the only
/// option when the checkpoint carries no adversary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FreshProbe {
    /// Cases the fresh discriminator trains on; the probe manifest itself
    /// when unset.
    pub train_manifest: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for FreshProbe {
    fn default() -> Self {
        FreshProbe { train_manifest: None, steps: 60, batch: 20, lr: 0.001, momentum: 0.9 }
    }
}

/// Train a discriminator from scratch against a frozen segmenter's tapped
/// features. The segmenter never updates (the adversarial weight is zero).
pub fn train_fresh_discriminator<E: Element>(
    seg: &Segmenter<E>,
    disc_spec: &DiscriminatorSpec,
    taps: &TapSet,
    source: &[CaseRecord],
    target: &[CaseRecord],
    budget: &FreshProbe,
    rng: &mut impl Rng,
) -> Result<Discriminator<E>> {
    let spec = seg.spec();
    taps.validate(spec)?;
    let mut disc = Discriminator::init(disc_spec.clone(), taps.channel_count(spec), rng)?;
    let mut opt = SgdMomentum::new(disc.params(), E::from_f64(budget.momentum));
    let geom = spec.training_geometry();
    let source_views: Vec<_> = source.iter().map(|c| c.image_view()).collect();
    let target_views: Vec<_> = target.iter().map(|c| c.image_view()).collect();
    let empty = SegBatch { samples: vec![] };
    for _ in 0..budget.steps {
        let batch = build_adv_batch(&source_views, &target_views, budget.batch, geom, rng)?;
        let mut seg_grads = GradStore::for_params(seg.params());
        let mut disc_grads = GradStore::for_params(disc.params());
        accumulate_step(
            seg,
            Some(&disc),
            taps,
            &empty,
            Some(&batch),
            0.0,
            &mut seg_grads,
            Some(&mut disc_grads),
        )?;
        opt.step(disc.params_mut(), &disc_grads, E::from_f64(budget.lr));
    }
    Ok(disc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub seg_spec_path: Option<PathBuf>,
    pub seg_spec: Option<SegmenterSpec>,
    pub disc_spec_path: Option<PathBuf>,
    pub disc_spec: Option<DiscriminatorSpec>,
    pub taps: Option<String>,
    /// Train a fresh discriminator instead of loading the checkpoint's.
    pub fresh: Option<FreshProbe>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            checkpoint: PathBuf::new(),
            manifest: PathBuf::new(),
            seg_spec_path: None,
            seg_spec: None,
            disc_spec_path: None,
            disc_spec: None,
            taps: None,
            fresh: None,
            n_samples: 200,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Inline referenced spec files; missing specs and taps fall back to
    /// the `run.json` recorded next to the checkpoint.
    pub fn resolve(&self) -> Result<ProbeConfig> {
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
        out.checkpoint = canonical(&out.checkpoint)?;
        out.manifest = canonical(&out.manifest)?;
        if let Some(f) = &mut out.fresh {
            if let Some(m) = &f.train_manifest {
                f.train_manifest = Some(canonical(m)?);
            }
        }
        if out.seg_spec.is_none() || out.disc_spec.is_none() || out.taps.is_none() {
            if let Some(run) = sibling_run_value(&out.checkpoint) {
                out.seg_spec = out.seg_spec.or_else(|| field_from(&run, "seg_spec"));
                out.disc_spec = out.disc_spec.or_else(|| field_from(&run, "disc_spec"));
                out.taps = out.taps.or_else(|| field_from(&run, "taps"));
            }
        }
        if out.seg_spec.is_none() {
            return Err(Error::InvalidConfig(
                "no segmenter spec: set seg_spec (or seg_spec_path), or keep the \
                 training run.json next to the checkpoint directory"
                    .into(),
            ));
        }
        Ok(out)
    }
}

/// Run the probe from a config: rebuild both networks from the checkpoint
/// and measure discriminator accuracy over the manifest's two domains.
pub fn run_probe(config: &ProbeConfig, out_dir: &Path) -> Result<f64> {
    let config = config.resolve()?;
    let seg_spec = config.seg_spec.clone().expect("resolved");
    seg_spec.validate()?;
    let disc_spec = config.disc_spec.clone().unwrap_or_default();
    disc_spec.validate()?;
    let taps = match &config.taps {
        Some(text) => TapSet::parse(text, &seg_spec)?,
        None => TapSet::default_for(&seg_spec),
    };
    taps.validate(&seg_spec)?;

    let ck = checkpoint::load(&config.checkpoint)?;
    let seg = Segmenter::<f32>::from_params(seg_spec.clone(), ck.take_prefixed("seg"))?;

    let cases = load_dataset(&config.manifest)?;
    let (source, target): (Vec<_>, Vec<_>) =
        cases.into_iter().partition(|c| c.domain == Domain::Source);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    runfile::save_run(&out_dir.join("run.json"), "probe", &config)?;

    // Separate streams keep the probe draw independent of the fresh
    // discriminator's training consumption.
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed);
    probe_rng.set_stream(1);

    let disc = match &config.fresh {
        Some(budget) => {
            let (pool_s, pool_t): (Vec<_>, Vec<_>) = match &budget.train_manifest {
                Some(path) => load_dataset(path)?
                    .into_iter()
                    .partition(|c| c.domain == Domain::Source),
                None => (source.clone(), target.clone()),
            };
            train_fresh_discriminator(
                &seg,
                &disc_spec,
                &taps,
                &pool_s,
                &pool_t,
                budget,
                &mut train_rng,
            )?
        }
        None => {
            let disc_params = ck.take_prefixed("disc");
            if disc_params.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "{} has no discriminator parameters (trained without the adversarial \
                     branch? probe with `fresh` to train one)",
                    config.checkpoint.display()
                )));
            }
            Discriminator::<f32>::from_params(
                disc_spec,
                taps.channel_count(&seg_spec),
                disc_params,
            )?
        }
    };
    probe_domain_accuracy(&seg, &disc, &taps, &source, &target, config.n_samples, &mut probe_rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DiscriminatorSpec, LayerSpec, SegmenterSpec};
    use crate::sampling::Domain;
    use crate::synth::{gen_case, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_seg_spec() -> SegmenterSpec {
        SegmenterSpec {
            in_channels: 2,
            classes: 2,
            pathway_layers: vec![LayerSpec::new(2, 3), LayerSpec::new(2, 3)],
            downsample_factor: 3,
            hidden_layers: vec![LayerSpec::new(3, 1)],
            activation_slope: 0.01,
            normal_input_extent: 13,
            low_input_extent: 7,
            ..SegmenterSpec::default()
        }
    }

    fn tiny_disc_spec() -> DiscriminatorSpec {
        DiscriminatorSpec {
            conv_layers: vec![LayerSpec::new(8, 3); 4],
            ..DiscriminatorSpec::default()
        }
    }

    fn heldout() -> (Vec<CaseRecord>, Vec<CaseRecord>) {
        let cfg = SynthConfig { extent: 25, ..SynthConfig::default() };
        let s = (0..2).map(|i| gen_case(&cfg, Domain::Source, i).unwrap()).collect();
        let t = (0..2).map(|i| gen_case(&cfg, Domain::Target, i).unwrap()).collect();
        (s, t)
    }

    #[test]
    fn zeroed_discriminator_scores_exact_chance() {
        let (s, t) = heldout();
        let spec = tiny_seg_spec();
        let taps = TapSet::default_for(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seg = Segmenter::<f32>::init(spec.clone(), &mut rng).unwrap();
        let disc =
            Discriminator::<f32>::zeros(tiny_disc_spec(), taps.channel_count(&spec)).unwrap();
        // All-zero logits tie-break to "source": half the balanced samples.
        let acc = probe_domain_accuracy(&seg, &disc, &taps, &s, &t, 40, &mut rng).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn untrained_networks_sit_near_chance() {
        let (s, t) = heldout();
        let spec = tiny_seg_spec();
        let taps = TapSet::default_for(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seg = Segmenter::<f32>::init(spec.clone(), &mut rng).unwrap();
        let disc =
            Discriminator::<f32>::init(tiny_disc_spec(), taps.channel_count(&spec), &mut rng)
                .unwrap();
        let n = 100;
        let acc = probe_domain_accuracy(&seg, &disc, &taps, &s, &t, n, &mut rng).unwrap();
        let tol = 3.0 / (n as f64).sqrt();
        assert!((acc - 0.5).abs() <= tol, "accuracy {acc} outside 0.5 +/- {tol}");
    }

    #[test]
    fn probe_is_seed_deterministic() {
        let (s, t) = heldout();
        let spec = tiny_seg_spec();
        let taps = TapSet::default_for(&spec);
        let mut init = ChaCha8Rng::seed_from_u64(9);
        let seg = Segmenter::<f32>::init(spec.clone(), &mut init).unwrap();
        let disc =
            Discriminator::<f32>::init(tiny_disc_spec(), taps.channel_count(&spec), &mut init)
                .unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            probe_domain_accuracy(&seg, &disc, &taps, &s, &t, 60, &mut rng).unwrap()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn degenerate_requests_are_rejected() {
        let (s, t) = heldout();
        let spec = tiny_seg_spec();
        let taps = TapSet::default_for(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let seg = Segmenter::<f32>::init(spec.clone(), &mut rng).unwrap();
        let disc =
            Discriminator::<f32>::init(tiny_disc_spec(), taps.channel_count(&spec), &mut rng)
                .unwrap();
        for n in [0, 7] {
            assert!(probe_domain_accuracy(&seg, &disc, &taps, &s, &t, n, &mut rng).is_err());
        }
        let err = probe_domain_accuracy(&seg, &disc, &taps, &s, &[], 10, &mut rng).unwrap_err();
        assert!(err.to_string().contains("target domain has no cases"));
    }

    #[test]
    fn fresh_discriminator_learns_a_blatant_domain_difference() {
        // Constant-0 vs constant-1 volumes: any features separate them, so
        // a freshly trained discriminator must approach perfect accuracy.
        let constant = |id: &str, domain: Domain, value: f32| {
            let image = crate::tensor::Tensor::full(vec![2, 25, 25, 25], value);
            CaseRecord::new(id.to_string(), image, None, None, domain).unwrap()
        };
        let s: Vec<_> =
            (0..2).map(|i| constant(&format!("s{i}"), Domain::Source, 0.0)).collect();
        let t: Vec<_> =
            (0..2).map(|i| constant(&format!("t{i}"), Domain::Target, 1.0)).collect();
        let spec = tiny_seg_spec();
        let taps = TapSet::default_for(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seg = Segmenter::<f32>::init(spec.clone(), &mut rng).unwrap();
        let budget = FreshProbe { steps: 15, batch: 4, lr: 0.05, ..FreshProbe::default() };
        let disc = train_fresh_discriminator(
            &seg,
            &tiny_disc_spec(),
            &taps,
            &s,
            &t,
            &budget,
            &mut rng,
        )
        .unwrap();
        let acc = probe_domain_accuracy(&seg, &disc, &taps, &s, &t, 40, &mut rng).unwrap();
        assert!(acc >= 0.9, "fresh discriminator stuck at {acc}");
    }

    #[test]
    fn run_probe_rebuilds_networks_from_checkpoint_and_run_file() {
        use crate::synth::gen_dataset;
        use crate::train::{train, TrainConfig, TrainMode, TrainSchedule};

        let dir = tempfile::tempdir().unwrap();
        let data_cfg =
            SynthConfig { extent: 25, source_cases: 2, target_cases: 2, ..SynthConfig::default() };
        let manifest = gen_dataset(&data_cfg, &dir.path().join("data")).unwrap();
        let train_cfg = TrainConfig {
            mode: TrainMode::Uda,
            manifest: manifest.clone(),
            seg_spec: Some(tiny_seg_spec()),
            disc_spec: Some(tiny_disc_spec()),
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
            ..TrainConfig::default()
        };
        let trained = train(&train_cfg, &dir.path().join("run")).unwrap();

        let probe_cfg = ProbeConfig {
            checkpoint: trained.final_checkpoint.clone(),
            manifest,
            n_samples: 10,
            ..ProbeConfig::default()
        };
        let acc = run_probe(&probe_cfg, &dir.path().join("probe")).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(dir.path().join("probe/run.json").exists());
        // Same seed, same accuracy.
        let acc2 = run_probe(&probe_cfg, &dir.path().join("probe2")).unwrap();
        assert_eq!(acc, acc2);

        // A source-only checkpoint carries no discriminator.
        let src_cfg = TrainConfig { mode: TrainMode::SourceOnly, ..train_cfg };
        let src = train(&src_cfg, &dir.path().join("src")).unwrap();
        let bad = ProbeConfig {
            checkpoint: src.final_checkpoint,
            ..probe_cfg
        };
        let err = run_probe(&bad, &dir.path().join("probe3")).unwrap_err();
        assert!(err.to_string().contains("no discriminator parameters"), "{err}");

        // The fresh mode covers exactly that gap.
        let fresh = ProbeConfig {
            fresh: Some(FreshProbe { steps: 2, batch: 2, ..FreshProbe::default() }),
            disc_spec: Some(tiny_disc_spec()),
            ..bad
        };
        let acc = run_probe(&fresh, &dir.path().join("probe4")).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
