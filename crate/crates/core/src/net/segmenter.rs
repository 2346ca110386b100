//! Dual-pathway multi-scale segmenter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::spec::{LayerSpec, SegmenterSpec};
use crate::net::taps::{TapPathway, TapPoint, TapSet};
use crate::tensor::{params, Element, ParamSet, Tape, Tensor, Var};

/// He (fan-in) normal init for one conv layer; biases start at zero.
pub(crate) fn init_conv<E: Element>(
    params: &mut ParamSet<E>,
    name: &str,
    cin: usize,
    layer: &LayerSpec,
    rng: &mut impl Rng,
) {
    let fan_in = cin * layer.kernel.pow(3);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std");
    let kernels = Tensor::from_fn(
        vec![layer.fm_count, cin, layer.kernel, layer.kernel, layer.kernel],
        |_| E::from_f64(normal.sample(rng)),
    );
    params.add(format!("{name}.kernels"), kernels);
    params.add(format!("{name}.bias"), Tensor::zeros(vec![layer.fm_count]));
}

pub(crate) fn zero_conv<E: Element>(
    params: &mut ParamSet<E>,
    name: &str,
    cin: usize,
    layer: &LayerSpec,
) {
    params.add(
        format!("{name}.kernels"),
        Tensor::zeros(vec![layer.fm_count, cin, layer.kernel, layer.kernel, layer.kernel]),
    );
    params.add(format!("{name}.bias"), Tensor::zeros(vec![layer.fm_count]));
}

#[derive(Clone, Debug)]
pub struct Segmenter<E> {
    spec: SegmenterSpec,
    params: ParamSet<E>,
}

impl<E: Element> Segmenter<E> {
    fn build(spec: SegmenterSpec, mut rng: Option<&mut dyn rand::RngCore>) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let add = |params: &mut ParamSet<E>, name: &str, cin: usize, layer: &LayerSpec,
                       rng: &mut Option<&mut dyn rand::RngCore>| {
            match rng {
                Some(r) => init_conv(params, name, cin, layer, r),
                None => zero_conv(params, name, cin, layer),
            }
        };
        for prefix in ["path_norm", "path_low"] {
            let mut cin = spec.in_channels;
            for (i, layer) in spec.pathway_layers.iter().enumerate() {
                add(&mut params, &format!("{prefix}.layer{}", i + 1), cin, layer, &mut rng);
                cin = layer.fm_count;
            }
        }
        let p = spec.pathway_len();
        let mut cin = 2 * spec.pathway_layers[p - 1].fm_count;
        for (j, layer) in spec.hidden_layers.iter().enumerate() {
            add(&mut params, &format!("hidden.layer{}", p + j + 1), cin, layer, &mut rng);
            cin = layer.fm_count;
        }
        add(&mut params, "classify", cin, &LayerSpec::new(spec.classes, 1), &mut rng);
        Ok(Segmenter { spec, params })
    }

    pub fn init(spec: SegmenterSpec, rng: &mut impl Rng) -> Result<Self> {
        Self::build(spec, Some(rng))
    }

    pub fn zeros(spec: SegmenterSpec) -> Result<Self> {
        Self::build(spec, None)
    }

    /// Wrap existing parameters (e.g. from a checkpoint), checking the layout.
    pub fn from_params(spec: SegmenterSpec, params: ParamSet<E>) -> Result<Self> {
        let expected = Self::zeros(spec.clone())?;
        params::check_same_layout(&expected.params, &params)?;
        Ok(Segmenter { spec, params })
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn cast<F: Element>(&self) -> Segmenter<F> {
        Segmenter { spec: self.spec.clone(), params: self.params.cast() }
    }

    /// Record parameters on a tape; the result runs forward passes.
    pub fn bind(&self, tape: &mut Tape<E>) -> Result<BoundSegmenter> {
        Ok(BoundSegmenter { spec: self.spec.clone(), vars: self.params.bind(tape)? })
    }
}

/// A segmenter whose parameters are bound to one tape.
pub struct BoundSegmenter {
    spec: SegmenterSpec,
    vars: Vec<Var>,
}

/// Result of one segmenter forward pass: per-voxel class logits plus the
/// requested taps, already upsampled/cropped to the output extent, in tap-set
/// order.
pub struct SegForward {
    pub logits: Var,
    pub taps: Vec<(TapPoint, Var)>,
}

impl SegForward {
    /// Channel-concatenated tap features (discriminator input).
    pub fn features<E: Element>(&self, tape: &mut Tape<E>) -> Result<Var> {
        let vars: Vec<Var> = self.taps.iter().map(|&(_, v)| v).collect();
        tape.concat_channels(&vars)
    }
}

impl BoundSegmenter {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        normal: &Tensor<E>,
        low: &Tensor<E>,
        taps: &TapSet,
    ) -> Result<SegForward> {
        let spec = &self.spec;
        let shrink = spec.pathway_shrink();
        let check_input = |name: &str, t: &Tensor<E>| -> Result<[usize; 3]> {
            if t.rank() != 4 || t.channels() != spec.in_channels {
                return Err(Error::ShapeMismatch {
                    op: "segmenter_forward",
                    detail: format!(
                        "{name} input must be [{}, x, y, z], got {:?}",
                        spec.in_channels,
                        t.shape()
                    ),
                });
            }
            let s = t.spatial();
            if s.iter().any(|&d| d <= shrink) {
                return Err(Error::ShapeMismatch {
                    op: "segmenter_forward",
                    detail: format!("{name} extent {:?} too small for shrink {shrink}", s),
                });
            }
            Ok(s)
        };
        let ns = check_input("normal", normal)?;
        let ls = check_input("low", low)?;
        let out = [ns[0] - shrink, ns[1] - shrink, ns[2] - shrink];
        let d = spec.downsample_factor;
        for a in 0..3 {
            if (ls[a] - shrink) * d < out[a] {
                return Err(Error::ShapeMismatch {
                    op: "segmenter_forward",
                    detail: format!(
                        "low input {:?} upsampled by {d} cannot cover output {:?}",
                        ls, out
                    ),
                });
            }
        }

        let slope = E::from_f64(spec.activation_slope);
        let p = spec.pathway_len();
        let run_pathway = |tape: &mut Tape<E>, input: &Tensor<E>, base: usize| -> Result<Vec<Var>> {
            let mut acts = Vec::with_capacity(p);
            let mut h = tape.leaf_no_grad(input.clone())?;
            for i in 0..p {
                let (kid, bid) = (2 * (base + i), 2 * (base + i) + 1);
                let c = tape.conv3d(h, self.vars[kid], self.vars[bid])?;
                h = tape.leaky_relu(c, slope)?;
                acts.push(h);
            }
            Ok(acts)
        };
        let norm_acts = run_pathway(tape, normal, 0)?;
        let low_acts = run_pathway(tape, low, p)?;

        let low_up = tape.upsample_repeat(low_acts[p - 1], d)?;
        let low_fused = tape.center_crop(low_up, out)?;
        let mut h = tape.concat_channels(&[norm_acts[p - 1], low_fused])?;
        let mut hidden_acts = Vec::with_capacity(spec.hidden_layers.len());
        for j in 0..spec.hidden_layers.len() {
            let (kid, bid) = (2 * (2 * p + j), 2 * (2 * p + j) + 1);
            let c = tape.conv3d(h, self.vars[kid], self.vars[bid])?;
            h = tape.leaky_relu(c, slope)?;
            hidden_acts.push(h);
        }
        let slot = 2 * p + spec.hidden_layers.len();
        let logits = tape.conv3d(h, self.vars[2 * slot], self.vars[2 * slot + 1])?;

        let mut tap_vars = Vec::with_capacity(taps.taps.len());
        for tp in &taps.taps {
            let var = match tp.pathway {
                TapPathway::Normal => {
                    let act = norm_acts[tp.layer - 1];
                    if tape.value(act).spatial() == out {
                        act
                    } else {
                        tape.center_crop(act, out)?
                    }
                }
                TapPathway::Low => {
                    let up = tape.upsample_repeat(low_acts[tp.layer - 1], d)?;
                    tape.center_crop(up, out)?
                }
                TapPathway::PostFusion => hidden_acts[tp.layer - p - 1],
            };
            tap_vars.push((*tp, var));
        }
        Ok(SegForward { logits, taps: tap_vars })
    }
}
