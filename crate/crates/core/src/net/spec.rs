//! Architecture specs for the segmenter and the discriminator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_VERSION: u32 = 1;

pub(crate) fn spec_version_default() -> u32 {
    SPEC_VERSION
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fm_count: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn new(fm_count: usize, kernel: usize) -> Self {
        LayerSpec { fm_count, kernel }
    }
}

/// Dual-pathway multi-scale 3D segmenter.
///
/// Two identical-topology pathways (normal resolution and downsampled-by-`D`)
/// of valid 3x3x3 convs, followed by fusion (upsample + center-crop + concat)
/// and 1x1x1 hidden layers, then a 1x1x1 classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterSpec {
    pub spec_version: u32,
    pub in_channels: usize,
    pub classes: usize,
    pub pathway_layers: Vec<LayerSpec>,
    pub downsample_factor: usize,
    pub hidden_layers: Vec<LayerSpec>,
    pub activation_slope: f64,
    pub normal_input_extent: usize,
    pub low_input_extent: usize,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        SegmenterSpec {
            spec_version: SPEC_VERSION,
            in_channels: 2,
            classes: 2,
            pathway_layers: [8, 8, 16, 16, 16, 16, 24, 24]
                .into_iter()
                .map(|fm| LayerSpec::new(fm, 3))
                .collect(),
            downsample_factor: 3,
            hidden_layers: vec![LayerSpec::new(32, 1), LayerSpec::new(32, 1)],
            activation_slope: 0.01,
            normal_input_extent: 25,
            low_input_extent: 19,
        }
    }
}

/// Input/output extents for one segmenter invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegGeometry {
    pub normal_in: usize,
    pub low_in: usize,
    pub out: usize,
    pub down: usize,
}

impl SegmenterSpec {
    pub fn pathway_len(&self) -> usize {
        self.pathway_layers.len()
    }

    /// Spatial shrink of one pathway: each valid conv removes `kernel - 1`.
    pub fn pathway_shrink(&self) -> usize {
        self.pathway_layers.iter().map(|l| l.kernel - 1).sum()
    }

    /// Receptive field of one pathway at its own resolution.
    pub fn pathway_receptive_field(&self) -> usize {
        self.pathway_shrink() + 1
    }

    /// Output extent for a given normal-pathway input extent.
    pub fn out_extent_for(&self, normal_in: usize) -> usize {
        normal_in - self.pathway_shrink()
    }

    /// Geometry of a training segment (uses the spec's training extents).
    pub fn training_geometry(&self) -> SegGeometry {
        SegGeometry {
            normal_in: self.normal_input_extent,
            low_in: self.low_input_extent,
            out: self.out_extent_for(self.normal_input_extent),
            down: self.downsample_factor,
        }
    }

    /// Minimal geometry producing an `out`-sized tile (dense inference).
    pub fn tile_geometry(&self, out: usize) -> SegGeometry {
        let shrink = self.pathway_shrink();
        let low_out = out.div_ceil(self.downsample_factor);
        SegGeometry {
            normal_in: out + shrink,
            low_in: low_out + shrink,
            out,
            down: self.downsample_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.pathway_layers.is_empty() {
            return fail("pathway_layers must not be empty".into());
        }
        for (i, l) in self.pathway_layers.iter().enumerate() {
            if l.kernel != 3 || l.fm_count == 0 {
                return fail(format!("pathway layer {} must be (fm >= 1, kernel 3)", i + 1));
            }
        }
        for (i, l) in self.hidden_layers.iter().enumerate() {
            if l.kernel != 1 || l.fm_count == 0 {
                return fail(format!("hidden layer {} must be (fm >= 1, kernel 1)", i + 1));
            }
        }
        if self.downsample_factor == 0 {
            return fail("downsample_factor must be >= 1".into());
        }
        let shrink = self.pathway_shrink();
        if self.normal_input_extent <= shrink {
            return fail(format!(
                "normal input extent {} leaves no output after shrink {}",
                self.normal_input_extent, shrink
            ));
        }
        if self.low_input_extent <= shrink {
            return fail(format!(
                "low input extent {} leaves no output after shrink {}",
                self.low_input_extent, shrink
            ));
        }
        let out = self.out_extent_for(self.normal_input_extent);
        let low_out = self.low_input_extent - shrink;
        if low_out * self.downsample_factor < out {
            return fail(format!(
                "low pathway covers {}x{} = {} voxels, output needs {}",
                low_out,
                self.downsample_factor,
                low_out * self.downsample_factor,
                out
            ));
        }
        Ok(())
    }

    /// Total scalar parameter count (kernels + biases of every weighted layer).
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, l: &LayerSpec| l.fm_count * cin * l.kernel.pow(3) + l.fm_count;
        let mut total = 0;
        // Both pathways have identical topology but separate parameters.
        for _ in 0..2 {
            let mut cin = self.in_channels;
            for l in &self.pathway_layers {
                total += conv(cin, l);
                cin = l.fm_count;
            }
        }
        let path_out = self.pathway_layers.last().expect("validated").fm_count;
        let mut cin = 2 * path_out;
        for l in &self.hidden_layers {
            total += conv(cin, l);
            cin = l.fm_count;
        }
        total += conv(cin, &LayerSpec::new(self.classes, 1));
        total
    }
}

/// Domain discriminator: stacked valid 3x3x3 convs and a 1x1x1 domain
/// classifier. Input channel count comes from the tap set, not the spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub spec_version: u32,
    pub conv_layers: Vec<LayerSpec>,
    pub domain_classes: usize,
    pub activation_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            spec_version: SPEC_VERSION,
            conv_layers: (0..4).map(|_| LayerSpec::new(20, 3)).collect(),
            domain_classes: 2,
            activation_slope: 0.01,
        }
    }
}

impl DiscriminatorSpec {
    /// Receptive field of the conv stack plus the 1x1x1 classifier.
    pub fn receptive_field(&self) -> usize {
        self.conv_layers.iter().map(|l| l.kernel - 1).sum::<usize>() + 1
    }

    pub fn min_input_extent(&self) -> usize {
        self.receptive_field()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.domain_classes != 2 {
            return fail(format!("domain_classes must be 2, got {}", self.domain_classes));
        }
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.kernel != 3 || l.fm_count == 0 {
                return fail(format!("discriminator layer {} must be (fm >= 1, kernel 3)", i + 1));
            }
        }
        // The discriminator must see exactly the segmenter's training output.
        if self.receptive_field() != 9 {
            return fail(format!(
                "discriminator receptive field must be 9, got {}",
                self.receptive_field()
            ));
        }
        Ok(())
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        let conv = |cin: usize, l: &LayerSpec| l.fm_count * cin * l.kernel.pow(3) + l.fm_count;
        let mut total = 0;
        let mut cin = in_channels;
        for l in &self.conv_layers {
            total += conv(cin, l);
            cin = l.fm_count;
        }
        total + conv(cin, &LayerSpec::new(self.domain_classes, 1))
    }
}
