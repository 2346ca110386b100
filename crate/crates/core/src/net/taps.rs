//! Multi-connected tap selection: which segmenter layers feed the
//! discriminator.
//!
//! Taps are taken after the layer's activation. Low-pathway taps are
//! upsampled by the downsample factor before cropping; every tap is
//! center-cropped to the segmenter output extent and concatenated in tap-set
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::spec::SegmenterSpec;

pub use crate::net::spec::SPEC_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPathway {
    Normal,
    Low,
    PostFusion,
}

/// One tapped layer. `layer` is the 1-based overall index: pathway layers are
/// `1..=P`, post-fusion hidden layers continue at `P+1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub pathway: TapPathway,
    pub layer: usize,
}

impl TapPoint {
    pub fn normal(layer: usize) -> Self {
        TapPoint { pathway: TapPathway::Normal, layer }
    }
    pub fn low(layer: usize) -> Self {
        TapPoint { pathway: TapPathway::Low, layer }
    }
    pub fn post_fusion(layer: usize) -> Self {
        TapPoint { pathway: TapPathway::PostFusion, layer }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapSet {
    #[serde(default = "super::spec::spec_version_default")]
    pub spec_version: u32,
    pub taps: Vec<TapPoint>,
}

impl TapSet {
    pub fn new(taps: Vec<TapPoint>) -> Self {
        TapSet { spec_version: SPEC_VERSION, taps }
    }

    /// The multi-connected default: layers 4, 6, 8 of both pathways plus the
    /// second post-fusion hidden layer (indices scale with pathway length).
    pub fn default_for(spec: &SegmenterSpec) -> Self {
        let p = spec.pathway_len();
        let mut layers = vec![p / 2, (p / 2 + p) / 2, p];
        layers.retain(|&l| l >= 1);
        layers.dedup();
        let mut taps = Vec::new();
        for layer in layers {
            taps.push(TapPoint::normal(layer));
            taps.push(TapPoint::low(layer));
        }
        if !spec.hidden_layers.is_empty() {
            taps.push(TapPoint::post_fusion(p + spec.hidden_layers.len()));
        }
        TapSet::new(taps)
    }

    /// Parse the `L<k>,<k>,...` form, e.g. `L10`, `L4`, `L4,6,8,10`.
    /// Layer indices `<= P` tap both pathways; higher indices tap the
    /// post-fusion hidden layers.
    pub fn parse(text: &str, spec: &SegmenterSpec) -> Result<Self> {
        let body = text
            .strip_prefix('L')
            .ok_or_else(|| Error::InvalidSpec(format!("tap set '{text}' must start with 'L'")))?;
        let p = spec.pathway_len();
        let mut taps = Vec::new();
        let mut last = 0;
        for part in body.split(',') {
            let layer: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad tap layer '{part}' in '{text}'")))?;
            if layer <= last {
                return Err(Error::InvalidSpec(format!(
                    "tap layers must be strictly increasing in '{text}'"
                )));
            }
            last = layer;
            if layer <= p {
                taps.push(TapPoint::normal(layer));
                taps.push(TapPoint::low(layer));
            } else {
                taps.push(TapPoint::post_fusion(layer));
            }
        }
        let set = TapSet::new(taps);
        set.validate(spec)?;
        Ok(set)
    }

    pub fn validate(&self, spec: &SegmenterSpec) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::InvalidSpec("tap set must not be empty".into()));
        }
        let p = spec.pathway_len();
        let h = spec.hidden_layers.len();
        let mut seen = Vec::new();
        for tp in &self.taps {
            match tp.pathway {
                TapPathway::Normal | TapPathway::Low => {
                    if tp.layer == 0 || tp.layer > p {
                        return Err(Error::InvalidSpec(format!(
                            "pathway tap layer {} out of range 1..={p}",
                            tp.layer
                        )));
                    }
                }
                TapPathway::PostFusion => {
                    if tp.layer <= p || tp.layer > p + h {
                        return Err(Error::InvalidSpec(format!(
                            "post-fusion tap layer {} out of range {}..={}",
                            tp.layer,
                            p + 1,
                            p + h
                        )));
                    }
                }
            }
            if seen.contains(tp) {
                return Err(Error::InvalidSpec(format!("duplicate tap {:?}", tp)));
            }
            seen.push(*tp);
        }
        Ok(())
    }

    /// Total channels after concatenation.
    pub fn channel_count(&self, spec: &SegmenterSpec) -> usize {
        let p = spec.pathway_len();
        self.taps
            .iter()
            .map(|tp| match tp.pathway {
                TapPathway::Normal | TapPathway::Low => spec.pathway_layers[tp.layer - 1].fm_count,
                TapPathway::PostFusion => spec.hidden_layers[tp.layer - p - 1].fm_count,
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_taps_match_published_selection() {
        let spec = SegmenterSpec::default();
        let taps = TapSet::default_for(&spec);
        assert_eq!(
            taps.taps,
            vec![
                TapPoint::normal(4),
                TapPoint::low(4),
                TapPoint::normal(6),
                TapPoint::low(6),
                TapPoint::normal(8),
                TapPoint::low(8),
                TapPoint::post_fusion(10),
            ]
        );
        taps.validate(&spec).unwrap();
        // 16+16 + 16+16 + 24+24 + 32
        assert_eq!(taps.channel_count(&spec), 144);
    }

    #[test]
    fn parse_handles_single_and_multi_forms() {
        let spec = SegmenterSpec::default();
        let t = TapSet::parse("L10", &spec).unwrap();
        assert_eq!(t.taps, vec![TapPoint::post_fusion(10)]);
        assert_eq!(t.channel_count(&spec), 32);

        let t = TapSet::parse("L4", &spec).unwrap();
        assert_eq!(t.taps, vec![TapPoint::normal(4), TapPoint::low(4)]);

        let t = TapSet::parse("L4,6,8,10", &spec).unwrap();
        assert_eq!(t, TapSet::default_for(&spec));

        let t = TapSet::parse("L2,4,6,8,10", &spec).unwrap();
        assert_eq!(t.taps.len(), 9);
        assert_eq!(t.channel_count(&spec), 144 + 16);
    }

    #[test]
    fn parse_rejects_malformed_sets() {
        let spec = SegmenterSpec::default();
        assert!(TapSet::parse("4,6", &spec).is_err());
        assert!(TapSet::parse("Lx", &spec).is_err());
        assert!(TapSet::parse("L8,4", &spec).is_err());
        assert!(TapSet::parse("L4,4", &spec).is_err());
        assert!(TapSet::parse("L11", &spec).is_err());
        assert!(TapSet::parse("L0", &spec).is_err());
    }

    #[test]
    fn validate_rejects_out_of_range_taps() {
        let spec = SegmenterSpec::default();
        let t = TapSet::new(vec![TapPoint::post_fusion(8)]);
        assert!(t.validate(&spec).is_err());
        let t = TapSet::new(vec![TapPoint::normal(9)]);
        assert!(t.validate(&spec).is_err());
        let t = TapSet::new(vec![]);
        assert!(t.validate(&spec).is_err());
    }

    #[test]
    fn taps_serialize_with_snake_case_pathways() {
        let t = TapSet::new(vec![TapPoint::normal(4), TapPoint::post_fusion(10)]);
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"normal\""));
        assert!(text.contains("\"post_fusion\""));
        let back: TapSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
    }
}
