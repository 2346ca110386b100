//! Batch assembly for the two training streams.
//!
//! Segmentation batches draw labelled segments with a foreground bias;
//! adversarial batches draw unlabelled segments balanced across domains.
//! The adversarial builder takes [`ImageView`]s, so label access is ruled
//! out by the interface rather than by convention.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::net::SegGeometry;
use crate::sampling::case::{CaseRecord, ImageView};
use crate::sampling::segment::{extract_image_patches, extract_segment, SegmentSample};

#[derive(Clone, Debug)]
pub struct SegBatch {
    pub samples: Vec<SegmentSample>,
}

/// Balanced unlabelled batch: the first half is source, the second target.
#[derive(Clone, Debug)]
pub struct AdvBatch {
    pub samples: Vec<SegmentSample>,
}

/// Per-case list of foreground voxel indices (linear, z fastest).
pub struct FgIndex {
    per_case: Vec<Vec<u32>>,
}

impl FgIndex {
    pub fn build(cases: &[CaseRecord]) -> Result<Self> {
        let mut per_case = Vec::with_capacity(cases.len());
        for case in cases {
            let labels = case.labels.as_ref().ok_or_else(|| {
                Error::Dataset(format!("case {} has no labels; cannot index foreground", case.case_id))
            })?;
            let fg: Vec<u32> = labels
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| i as u32)
                .collect();
            per_case.push(fg);
        }
        Ok(FgIndex { per_case })
    }

    pub fn len(&self) -> usize {
        self.per_case.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_case.is_empty()
    }

    pub fn foreground(&self, case: usize) -> &[u32] {
        &self.per_case[case]
    }
}

fn unravel(idx: usize, spatial: [usize; 3]) -> [usize; 3] {
    let [_, sy, sz] = spatial;
    [idx / (sy * sz), (idx / sz) % sy, idx % sz]
}

/// Number of foreground-centered segments in a batch of `n`.
pub fn foreground_quota(n: usize, fg_fraction: f64) -> usize {
    ((n as f64 * fg_fraction).round() as usize).min(n)
}

/// Draw a labelled segmentation batch.
///
/// The first `round(n * fg_fraction)` segments are centered on a uniformly
/// drawn foreground voxel of a uniformly drawn case; the rest are centered
/// on a uniformly drawn voxel of the volume. A case without foreground
/// falls back to a uniform center (with a warning).
pub fn build_seg_batch(
    cases: &[CaseRecord],
    fg: &FgIndex,
    n: usize,
    fg_fraction: f64,
    geom: SegGeometry,
    rng: &mut impl Rng,
) -> Result<SegBatch> {
    if cases.is_empty() {
        return Err(Error::Dataset("segmentation batch requires at least one case".into()));
    }
    if fg.len() != cases.len() {
        return Err(Error::Dataset(format!(
            "foreground index covers {} cases, dataset has {}",
            fg.len(),
            cases.len()
        )));
    }
    let n_fg = foreground_quota(n, fg_fraction);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let case_idx = rng.gen_range(0..cases.len());
        let case = &cases[case_idx];
        let spatial = case.spatial();
        let voxel = if i < n_fg && !fg.foreground(case_idx).is_empty() {
            let f = fg.foreground(case_idx);
            f[rng.gen_range(0..f.len())] as usize
        } else {
            if i < n_fg {
                warn!("case {} has no foreground; sampling uniformly", case.case_id);
            }
            rng.gen_range(0..spatial[0] * spatial[1] * spatial[2])
        };
        samples.push(extract_segment(case, unravel(voxel, spatial), geom)?);
    }
    Ok(SegBatch { samples })
}

/// Draw a balanced unlabelled batch: exactly `n / 2` segments per domain,
/// centers uniform over each volume. `n` must be even.
pub fn build_adv_batch(
    source: &[ImageView<'_>],
    target: &[ImageView<'_>],
    n: usize,
    geom: SegGeometry,
    rng: &mut impl Rng,
) -> Result<AdvBatch> {
    if n % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "adversarial batch size must be even, got {n}"
        )));
    }
    if source.is_empty() {
        return Err(Error::EmptyDomain("source domain has no cases".into()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDomain("target domain has no cases".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for views in [source, target] {
        for _ in 0..n / 2 {
            let view = &views[rng.gen_range(0..views.len())];
            let spatial = view.spatial();
            let voxel = rng.gen_range(0..spatial[0] * spatial[1] * spatial[2]);
            let center = unravel(voxel, spatial);
            let (normal, low) = extract_image_patches(view, center, geom)?;
            samples.push(SegmentSample {
                normal,
                low,
                labels: None,
                domain: view.domain,
                case_id: view.case_id.to_string(),
                center,
            });
        }
    }
    Ok(AdvBatch { samples })
}
