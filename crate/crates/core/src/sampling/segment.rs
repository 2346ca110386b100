//! Segment extraction: centered multi-scale patches with zero padding.

use crate::error::{Error, Result};
use crate::net::SegGeometry;
use crate::sampling::case::{CaseRecord, Domain, ImageView};
use crate::tensor::{LabelGrid, Tensor};

/// One training sample: a normal-resolution patch and a wider downsampled
/// context patch around the same center, plus (for labelled batches) the
/// label patch matching the segmenter's output window.
#[derive(Clone, Debug)]
pub struct SegmentSample {
    pub normal: Tensor<f32>,
    pub low: Tensor<f32>,
    pub labels: Option<LabelGrid>,
    pub domain: Domain,
    pub case_id: String,
    pub center: [usize; 3],
}

/// First voxel of a centered window (may be negative near the border).
pub fn patch_start(center: usize, extent: usize) -> isize {
    center as isize - ((extent - 1) / 2) as isize
}

fn read_image_patch(
    image: &Tensor<f32>,
    center: [usize; 3],
    extent: usize,
    stride: usize,
) -> Tensor<f32> {
    let [sx, sy, sz] = image.spatial();
    let channels = image.channels();
    let spatial = sx * sy * sz;
    // With stride D the window spans D*(extent-1)+1 voxels around the same
    // center as the normal patch: positions are center + D*(i - (extent-1)/2).
    let start: Vec<isize> = center
        .iter()
        .map(|&c| c as isize - (stride * ((extent - 1) / 2)) as isize)
        .collect();
    let pos = |a: usize, i: usize| start[a] + (stride * i) as isize;
    let mut data = Vec::with_capacity(channels * extent * extent * extent);
    let idata = image.data();
    for ch in 0..channels {
        let plane = &idata[ch * spatial..(ch + 1) * spatial];
        for i in 0..extent {
            let x = pos(0, i);
            for j in 0..extent {
                let y = pos(1, j);
                for k in 0..extent {
                    let z = pos(2, k);
                    let v = if x < 0
                        || y < 0
                        || z < 0
                        || x as usize >= sx
                        || y as usize >= sy
                        || z as usize >= sz
                    {
                        0.0
                    } else {
                        plane[(x as usize * sy + y as usize) * sz + z as usize]
                    };
                    data.push(v);
                }
            }
        }
    }
    Tensor::new(vec![channels, extent, extent, extent], data).expect("patch shape")
}

fn read_label_patch(labels: &LabelGrid, center: [usize; 3], extent: usize) -> LabelGrid {
    let [sx, sy, sz] = labels.shape();
    let start: Vec<isize> = center.iter().map(|&c| patch_start(c, extent)).collect();
    let mut data = Vec::with_capacity(extent * extent * extent);
    for i in 0..extent {
        let x = start[0] + i as isize;
        for j in 0..extent {
            let y = start[1] + j as isize;
            for k in 0..extent {
                let z = start[2] + k as isize;
                let v = if x < 0
                    || y < 0
                    || z < 0
                    || x as usize >= sx
                    || y as usize >= sy
                    || z as usize >= sz
                {
                    0 // outside reads as background
                } else {
                    labels.get(x as usize, y as usize, z as usize)
                };
                data.push(v);
            }
        }
    }
    LabelGrid::new([extent, extent, extent], data).expect("label patch shape")
}

fn check_center(spatial: [usize; 3], center: [usize; 3], case_id: &str) -> Result<()> {
    if center.iter().zip(&spatial).any(|(&c, &s)| c >= s) {
        return Err(Error::Dataset(format!(
            "case {case_id}: center {:?} outside volume {:?}",
            center, spatial
        )));
    }
    Ok(())
}

/// Label-blind extraction: normal + low patches only.
pub fn extract_image_patches(
    view: &ImageView<'_>,
    center: [usize; 3],
    geom: SegGeometry,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    check_center(view.spatial(), center, view.case_id)?;
    let normal = read_image_patch(view.image, center, geom.normal_in, 1);
    let low = read_image_patch(view.image, center, geom.low_in, geom.down);
    Ok((normal, low))
}

/// Full extraction including the label patch (when the case has labels).
pub fn extract_segment(
    case: &CaseRecord,
    center: [usize; 3],
    geom: SegGeometry,
) -> Result<SegmentSample> {
    let (normal, low) = extract_image_patches(&case.image_view(), center, geom)?;
    let labels = case.labels.as_ref().map(|l| read_label_patch(l, center, geom.out));
    Ok(SegmentSample {
        normal,
        low,
        labels,
        domain: case.domain,
        case_id: case.case_id.clone(),
        center,
    })
}
