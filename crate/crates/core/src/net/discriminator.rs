//! Domain discriminator over concatenated segmenter taps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::segmenter::{init_conv, zero_conv};
use crate::net::spec::{DiscriminatorSpec, LayerSpec};
use crate::tensor::{params, Element, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Discriminator<E> {
    spec: DiscriminatorSpec,
    in_channels: usize,
    params: ParamSet<E>,
}

impl<E: Element> Discriminator<E> {
    fn build(
        spec: DiscriminatorSpec,
        in_channels: usize,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Self> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(Error::InvalidSpec("discriminator needs >= 1 input channel".into()));
        }
        let mut params = ParamSet::new();
        let mut cin = in_channels;
        let classifier = LayerSpec::new(spec.domain_classes, 1);
        let layers: Vec<(String, usize, LayerSpec)> = spec
            .conv_layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("layer{}", i + 1), *l))
            .chain(std::iter::once((format!("layer{}", spec.conv_layers.len() + 1), classifier)))
            .map(|(name, l)| {
                let here = cin;
                cin = l.fm_count;
                (name, here, l)
            })
            .collect();
        for (name, cin, layer) in &layers {
            match &mut rng {
                Some(r) => init_conv(&mut params, name, *cin, layer, r),
                None => zero_conv(&mut params, name, *cin, layer),
            }
        }
        Ok(Discriminator { spec, in_channels, params })
    }

    pub fn init(spec: DiscriminatorSpec, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::build(spec, in_channels, Some(rng))
    }

    pub fn zeros(spec: DiscriminatorSpec, in_channels: usize) -> Result<Self> {
        Self::build(spec, in_channels, None)
    }

    pub fn from_params(
        spec: DiscriminatorSpec,
        in_channels: usize,
        params: ParamSet<E>,
    ) -> Result<Self> {
        let expected = Self::zeros(spec.clone(), in_channels)?;
        params::check_same_layout(&expected.params, &params)?;
        Ok(Discriminator { spec, in_channels, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn cast<F: Element>(&self) -> Discriminator<F> {
        Discriminator {
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> Result<BoundDiscriminator> {
        Ok(BoundDiscriminator {
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            vars: self.params.bind(tape)?,
        })
    }
}

pub struct BoundDiscriminator {
    spec: DiscriminatorSpec,
    in_channels: usize,
    vars: Vec<Var>,
}

impl BoundDiscriminator {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-position domain logits: input `[C, s, s, s]` with `s >= 9` maps to
    /// `[classes, s-8, s-8, s-8]`.
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, features: Var) -> Result<Var> {
        let t = tape.value(features);
        if t.rank() != 4 || t.channels() != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!(
                    "features must be [{}, x, y, z], got {:?}",
                    self.in_channels,
                    t.shape()
                ),
            });
        }
        let min = self.spec.min_input_extent();
        if t.spatial().iter().any(|&d| d < min) {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!("features extent {:?} below receptive field {min}", t.spatial()),
            });
        }
        let slope = E::from_f64(self.spec.activation_slope);
        let mut h = features;
        for i in 0..self.spec.conv_layers.len() {
            let c = tape.conv3d(h, self.vars[2 * i], self.vars[2 * i + 1])?;
            h = tape.leaky_relu(c, slope)?;
        }
        let last = self.spec.conv_layers.len();
        tape.conv3d(h, self.vars[2 * last], self.vars[2 * last + 1])
    }
}

/// Collapse per-position logits into one domain decision: logits are averaged
/// over positions, then argmax (first index wins ties).
pub fn domain_prediction<E: Element>(logits: &Tensor<E>) -> usize {
    let classes = logits.channels();
    let n: usize = logits.spatial().iter().product();
    let data = logits.data();
    let mut best = 0;
    let mut best_sum = E::neg_infinity();
    for ch in 0..classes {
        let mut sum = E::zero();
        for &v in &data[ch * n..(ch + 1) * n] {
            sum = sum + v;
        }
        if sum > best_sum {
            best_sum = sum;
            best = ch;
        }
    }
    best
}
