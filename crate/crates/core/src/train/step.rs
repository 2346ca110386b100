//! One joint update: adversarial batch, then segmentation batch.
//!
//! Each sample runs on its own tape, so samples can be processed in
//! parallel; gradients are merged in batch order afterwards, which keeps
//! the result bitwise independent of the thread count. The adversarial
//! loss is backpropagated once per sample and harvested twice: at `+1`
//! into the discriminator and at `-alpha` into the segmenter (the
//! objective is L_seg - alpha * L_adv, so the segmenter ascends where the
//! discriminator descends). With `alpha == 0` the features are detached
//! and only the discriminator sees a backward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{domain_prediction, Discriminator, Segmenter, TapSet};
use crate::sampling::{AdvBatch, SegBatch, SegmentSample};
use crate::tensor::{Element, GradStore, LabelGrid, SgdMomentum, Tape};

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// Mean cross-entropy over the segmentation batch.
    pub l_seg: f64,
    /// Mean discriminator cross-entropy over the adversarial batch.
    pub l_adv: Option<f64>,
    /// Discriminator accuracy on the step's own adversarial batch.
    pub disc_acc: Option<f64>,
}

fn constant_targets(shape: [usize; 3], label: u8) -> LabelGrid {
    LabelGrid::full(shape, label)
}

/// Returns `(seg grads, disc grads, loss, correct)` for one adversarial
/// sample, scaled for a batch of `n`.
fn adv_sample<E: Element>(
    seg: &Segmenter<E>,
    disc: &Discriminator<E>,
    taps: &TapSet,
    s: &SegmentSample,
    n: usize,
    alpha: f64,
) -> Result<(Option<GradStore<E>>, GradStore<E>, f64, bool)> {
    let inv_n = E::from_f64(1.0 / n as f64);
    let domain_label = s.domain.label();
    let mut disc_grads = GradStore::for_params(disc.params());

    if alpha == 0.0 {
        // Detached: compute features without keeping the segmenter graph.
        let feat_val = {
            let mut ftape = Tape::new();
            let bound = seg.bind(&mut ftape)?;
            let fwd = bound.forward(&mut ftape, &s.normal.cast(), &s.low.cast(), taps)?;
            let feat = fwd.features(&mut ftape)?;
            ftape.value(feat).clone()
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf_no_grad(feat_val)?;
        let bound_disc = disc.bind(&mut tape)?;
        let logits = bound_disc.forward(&mut tape, leaf)?;
        let out = tape.value(logits).spatial();
        let loss = tape.softmax_xent_mean(logits, &constant_targets(out, domain_label))?;
        let correct = domain_prediction(tape.value(logits)) == domain_label as usize;
        let loss_val = tape.value(loss).item().to_f64();
        tape.backward_scaled(loss, inv_n)?;
        disc_grads.accumulate_from_tape(&tape, bound_disc.vars(), E::one());
        Ok((None, disc_grads, loss_val, correct))
    } else {
        let mut tape = Tape::new();
        let bound_seg = seg.bind(&mut tape)?;
        let fwd = bound_seg.forward(&mut tape, &s.normal.cast(), &s.low.cast(), taps)?;
        let features = fwd.features(&mut tape)?;
        let bound_disc = disc.bind(&mut tape)?;
        let logits = bound_disc.forward(&mut tape, features)?;
        let out = tape.value(logits).spatial();
        let loss = tape.softmax_xent_mean(logits, &constant_targets(out, domain_label))?;
        let correct = domain_prediction(tape.value(logits)) == domain_label as usize;
        let loss_val = tape.value(loss).item().to_f64();
        tape.backward_scaled(loss, inv_n)?;
        let mut seg_grads = GradStore::for_params(seg.params());
        seg_grads.accumulate_from_tape(&tape, bound_seg.vars(), E::from_f64(-alpha));
        disc_grads.accumulate_from_tape(&tape, bound_disc.vars(), E::one());
        Ok((Some(seg_grads), disc_grads, loss_val, correct))
    }
}

/// Gradients for one labelled segment, scaled for a batch of `n`.
fn seg_sample<E: Element>(
    seg: &Segmenter<E>,
    s: &SegmentSample,
    n: usize,
) -> Result<(GradStore<E>, f64)> {
    let labels = s.labels.as_ref().ok_or_else(|| {
        Error::Dataset(format!("case {}: segmentation sample without labels", s.case_id))
    })?;
    let no_taps = TapSet::new(vec![]);
    let mut tape = Tape::new();
    let bound = seg.bind(&mut tape)?;
    let fwd = bound.forward(&mut tape, &s.normal.cast(), &s.low.cast(), &no_taps)?;
    let loss = tape.softmax_xent_mean(fwd.logits, labels)?;
    let loss_val = tape.value(loss).item().to_f64();
    tape.backward_scaled(loss, E::from_f64(1.0 / n as f64))?;
    let mut grads = GradStore::for_params(seg.params());
    grads.accumulate_from_tape(&tape, bound.vars(), E::one());
    Ok((grads, loss_val))
}

/// Accumulate batch-mean gradients into the provided stores without
/// touching any parameters. The adversarial batch contributes first, in
/// batch order, then the segmentation batch. Exposed separately so the
/// update direction can be inspected against isolated backward passes.
pub fn accumulate_step<E: Element>(
    seg: &Segmenter<E>,
    disc: Option<&Discriminator<E>>,
    taps: &TapSet,
    seg_batch: &SegBatch,
    adv_batch: Option<&AdvBatch>,
    alpha: f64,
    seg_grads: &mut GradStore<E>,
    mut disc_grads: Option<&mut GradStore<E>>,
) -> Result<StepReport> {
    let mut l_adv = None;
    let mut disc_acc = None;
    if let (Some(disc), Some(batch)) = (disc, adv_batch) {
        let n = batch.samples.len();
        let results: Vec<_> = batch
            .samples
            .par_iter()
            .map(|s| adv_sample(seg, disc, taps, s, n, alpha))
            .collect();
        let store = disc_grads
            .as_deref_mut()
            .expect("adversarial batch without a discriminator gradient store");
        let mut total = 0.0;
        let mut correct = 0usize;
        for r in results {
            let (sg, dg, loss, ok) = r?;
            if let Some(sg) = sg {
                seg_grads.accumulate_store(&sg, E::one());
            }
            store.accumulate_store(&dg, E::one());
            total += loss;
            correct += ok as usize;
        }
        l_adv = Some(total / n as f64);
        disc_acc = Some(correct as f64 / n as f64);
    }

    let n = seg_batch.samples.len();
    let results: Vec<_> =
        seg_batch.samples.par_iter().map(|s| seg_sample(seg, s, n)).collect();
    let mut total = 0.0;
    for r in results {
        let (g, loss) = r?;
        seg_grads.accumulate_store(&g, E::one());
        total += loss;
    }
    let l_seg = if n == 0 { 0.0 } else { total / n as f64 };

    let report = StepReport { l_seg, l_adv, disc_acc };
    for (name, value) in [("L_seg", Some(l_seg)), ("L_adv", l_adv)] {
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
    }
    Ok(report)
}

/// Full Eq.-style update: accumulate both branches, then one optimizer
/// step per network with its own learning rate. Gradient stores are local,
/// so a failed step leaves every parameter untouched.
pub fn train_step<E: Element>(
    seg: &mut Segmenter<E>,
    seg_opt: &mut SgdMomentum<E>,
    disc: Option<(&mut Discriminator<E>, &mut SgdMomentum<E>)>,
    taps: &TapSet,
    seg_batch: &SegBatch,
    adv_batch: Option<&AdvBatch>,
    alpha: f64,
    lr_seg: f64,
    lr_disc: f64,
) -> Result<StepReport> {
    let mut seg_grads = GradStore::for_params(seg.params());
    match disc {
        Some((disc, disc_opt)) => {
            let mut disc_grads = GradStore::for_params(disc.params());
            let report = accumulate_step(
                seg,
                Some(disc),
                taps,
                seg_batch,
                adv_batch,
                alpha,
                &mut seg_grads,
                Some(&mut disc_grads),
            )?;
            seg_opt.step(seg.params_mut(), &seg_grads, E::from_f64(lr_seg));
            disc_opt.step(disc.params_mut(), &disc_grads, E::from_f64(lr_disc));
            Ok(report)
        }
        None => {
            let report = accumulate_step(
                seg,
                None,
                taps,
                seg_batch,
                adv_batch,
                alpha,
                &mut seg_grads,
                None,
            )?;
            seg_opt.step(seg.params_mut(), &seg_grads, E::from_f64(lr_seg));
            Ok(report)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DiscriminatorSpec, LayerSpec, SegmenterSpec};
    use crate::sampling::{build_adv_batch, build_seg_batch, Domain, FgIndex};
    use crate::synth::{gen_case, SynthConfig};
    use crate::tensor::ParamSet;
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
            conv_layers: vec![LayerSpec::new(4, 3); 4],
            ..DiscriminatorSpec::default()
        }
    }

    struct Fixture {
        cases: Vec<crate::sampling::CaseRecord>,
        taps: TapSet,
        spec: SegmenterSpec,
    }

    fn fixture() -> Fixture {
        let cfg = SynthConfig { extent: 25, ..SynthConfig::default() };
        let mut cases: Vec<_> =
            (0..2).map(|i| gen_case(&cfg, Domain::Source, i).unwrap()).collect();
        cases.extend((0..2).map(|i| gen_case(&cfg, Domain::Target, i).unwrap()));
        let spec = tiny_seg_spec();
        let taps = TapSet::default_for(&spec);
        Fixture { cases, taps, spec }
    }

    fn batches(f: &Fixture, seed: u64) -> (SegBatch, AdvBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source: Vec<_> = f.cases[..2].to_vec();
        let fg = FgIndex::build(&source).unwrap();
        let geom = f.spec.training_geometry();
        let seg_batch = build_seg_batch(&source, &fg, 4, 0.5, geom, &mut rng).unwrap();
        let s_views: Vec<_> = f.cases[..2].iter().map(|c| c.image_view()).collect();
        let t_views: Vec<_> = f.cases[2..].iter().map(|c| c.image_view()).collect();
        let adv_batch = build_adv_batch(&s_views, &t_views, 4, geom, &mut rng).unwrap();
        (seg_batch, adv_batch)
    }

    fn nets<E: Element>(f: &Fixture, seed: u64) -> (Segmenter<E>, Discriminator<E>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seg = Segmenter::<E>::init(f.spec.clone(), &mut rng).unwrap();
        let disc =
            Discriminator::<E>::init(tiny_disc_spec(), f.taps.channel_count(&f.spec), &mut rng)
                .unwrap();
        (seg, disc)
    }

    fn params_equal<E: Element>(a: &ParamSet<E>, b: &ParamSet<E>) -> bool {
        (0..a.len()).all(|id| a.get(id).data() == b.get(id).data())
    }

    #[test]
    fn alpha_zero_update_is_bitwise_plain_supervised() {
        let f = fixture();
        let (seg0, disc0) = nets::<f32>(&f, 40);
        let (seg_batch, adv_batch) = batches(&f, 41);

        let mut seg_a = seg0.clone();
        let mut disc_a = disc0.clone();
        let mut opt_a = SgdMomentum::new(seg_a.params(), 0.9);
        let mut dopt_a = SgdMomentum::new(disc_a.params(), 0.9);
        train_step(
            &mut seg_a,
            &mut opt_a,
            Some((&mut disc_a, &mut dopt_a)),
            &f.taps,
            &seg_batch,
            Some(&adv_batch),
            0.0,
            0.01,
            0.001,
        )
        .unwrap();

        let mut seg_b = seg0.clone();
        let mut opt_b = SgdMomentum::new(seg_b.params(), 0.9);
        train_step(
            &mut seg_b,
            &mut opt_b,
            None,
            &f.taps,
            &seg_batch,
            None,
            0.0,
            0.01,
            0.001,
        )
        .unwrap();

        assert!(params_equal(seg_a.params(), seg_b.params()));
        // The discriminator still learned on its own.
        assert!(!params_equal(disc_a.params(), disc0.params()));
    }

    #[test]
    fn seg_gradient_decomposes_into_g_seg_minus_alpha_g_adv() {
        let f = fixture();
        let (seg, disc) = nets::<f64>(&f, 42);
        let (seg_batch, adv_batch) = batches(&f, 43);
        let empty = SegBatch { samples: vec![] };

        // Isolated passes.
        let mut g_seg = GradStore::for_params(seg.params());
        accumulate_step(&seg, None, &f.taps, &seg_batch, None, 0.0, &mut g_seg, None).unwrap();
        let mut g_adv_seg = GradStore::for_params(seg.params());
        let mut g_adv_disc = GradStore::for_params(disc.params());
        accumulate_step(
            &seg,
            Some(&disc),
            &f.taps,
            &empty,
            Some(&adv_batch),
            1.0,
            &mut g_adv_seg,
            Some(&mut g_adv_disc),
        )
        .unwrap();

        for alpha in [0.0, 0.05, 1.0] {
            let mut full_seg = GradStore::for_params(seg.params());
            let mut full_disc = GradStore::for_params(disc.params());
            accumulate_step(
                &seg,
                Some(&disc),
                &f.taps,
                &seg_batch,
                Some(&adv_batch),
                alpha,
                &mut full_seg,
                Some(&mut full_disc),
            )
            .unwrap();
            // Combined segmenter gradient: g_seg + alpha * (-g_adv).
            // (g_adv_seg already carries the -1 harvest at alpha=1.)
            for id in 0..seg.params().len() {
                let gs = g_seg.get(id).unwrap();
                let ga = g_adv_seg.get(id);
                let fu = full_seg.get(id).unwrap();
                for e in 0..gs.len() {
                    let want = gs[e] + alpha * ga.map_or(0.0, |g| g[e]);
                    assert!(
                        (fu[e] - want).abs() <= 1e-6 * (1.0 + want.abs()),
                        "alpha {alpha} param {id} elem {e}: {} vs {want}",
                        fu[e]
                    );
                }
            }
            // Discriminator gradient independent of alpha.
            for id in 0..disc.params().len() {
                let a = full_disc.get(id).unwrap();
                let b = g_adv_disc.get(id).unwrap();
                for e in 0..a.len() {
                    assert!((a[e] - b[e]).abs() <= 1e-9 * (1.0 + b[e].abs()));
                }
            }
        }
    }

    #[test]
    fn disc_step_descends_its_own_loss_on_frozen_features() {
        let f = fixture();
        let (seg, mut disc) = nets::<f32>(&f, 44);
        let (_, adv_batch) = batches(&f, 45);
        let empty = SegBatch { samples: vec![] };

        let eval = |disc: &Discriminator<f32>| -> f64 {
            let mut sg = GradStore::for_params(seg.params());
            let mut dg = GradStore::for_params(disc.params());
            accumulate_step(
                &seg,
                Some(disc),
                &f.taps,
                &empty,
                Some(&adv_batch),
                0.0,
                &mut sg,
                Some(&mut dg),
            )
            .unwrap()
            .l_adv
            .unwrap()
        };

        let before = eval(&disc);
        let mut sg = GradStore::for_params(seg.params());
        let mut dg = GradStore::for_params(disc.params());
        accumulate_step(
            &seg,
            Some(&disc),
            &f.taps,
            &empty,
            Some(&adv_batch),
            0.0,
            &mut sg,
            Some(&mut dg),
        )
        .unwrap();
        let mut opt = SgdMomentum::new(disc.params(), 0.0);
        opt.step(disc.params_mut(), &dg, 1e-3);
        let after = eval(&disc);
        assert!(
            after <= before + 1e-7,
            "L_adv rose after a small descent step: {before} -> {after}"
        );
    }

    #[test]
    fn step_is_deterministic_across_runs() {
        let f = fixture();
        let (seg_batch, adv_batch) = batches(&f, 46);
        let run = || {
            let (mut seg, mut disc) = nets::<f32>(&f, 47);
            let mut opt = SgdMomentum::new(seg.params(), 0.9);
            let mut dopt = SgdMomentum::new(disc.params(), 0.9);
            train_step(
                &mut seg,
                &mut opt,
                Some((&mut disc, &mut dopt)),
                &f.taps,
                &seg_batch,
                Some(&adv_batch),
                0.05,
                0.01,
                0.001,
            )
            .unwrap();
            (seg, disc)
        };
        let (sa, da) = run();
        let (sb, db) = run();
        assert!(params_equal(sa.params(), sb.params()));
        assert!(params_equal(da.params(), db.params()));
    }

    #[test]
    fn non_finite_forward_aborts_with_op_name_and_no_update() {
        let f = fixture();
        let (mut seg, _) = nets::<f32>(&f, 48);
        let (seg_batch, _) = batches(&f, 49);
        let id = seg.params().find("classify.bias").unwrap();
        let before = seg.params().get(id).clone();
        let poisoned = crate::tensor::Tensor::full(before.shape().to_vec(), f32::INFINITY);
        seg.params_mut().set(id, poisoned);
        let mut opt = SgdMomentum::new(seg.params(), 0.9);
        let err = train_step(
            &mut seg,
            &mut opt,
            None,
            &f.taps,
            &seg_batch,
            None,
            0.0,
            0.01,
            0.001,
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }
}
