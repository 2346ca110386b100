//! Intensity normalization: percentile windowing then standardization.

use crate::error::{Error, Result};
use crate::tensor::{LabelGrid, Tensor};

/// Default percentile window: clamp to `[P2, P98]` before standardizing.
pub const INTENSITY_WINDOW: f64 = 0.02;

/// Percentile by sorting with linear interpolation between ranks
/// (`q` in `[0, 1]`).
pub fn percentile(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty(), "percentile of empty slice");
    assert!((0.0..=1.0).contains(&q));
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite intensity"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        sorted[lo]
    } else {
        let a = sorted[lo] as f64;
        let b = sorted[lo + 1] as f64;
        (a + (b - a) * frac) as f32
    }
}

/// Window each channel to the in-mask `[P_w, P_(1-w)]` intensity range, then
/// shift/scale to zero mean, unit variance over the mask. Constant channels
/// become all-zero. The transform applies to every voxel; statistics come from
/// in-mask voxels only (the mask defaults to the whole volume).
pub fn normalize_volume(
    image: &Tensor<f32>,
    mask: Option<&LabelGrid>,
    window_pct: f64,
) -> Result<Tensor<f32>> {
    assert_eq!(image.rank(), 4, "normalize_volume wants [C, X, Y, Z]");
    assert!((0.0..0.5).contains(&window_pct), "window_pct must be in [0, 0.5)");
    let spatial: usize = image.spatial().iter().product();
    let channels = image.channels();
    if let Some(m) = mask {
        if m.shape() != image.spatial() {
            return Err(Error::ShapeMismatch {
                op: "normalize_volume",
                detail: format!("mask {:?} vs image {:?}", m.shape(), image.spatial()),
            });
        }
        if m.count_nonzero() == 0 {
            return Err(Error::Dataset("normalization mask is empty".into()));
        }
    }
    let in_mask = |v: usize| mask.map_or(true, |m| m.data()[v] != 0);

    let mut out = Vec::with_capacity(image.numel());
    for ch in 0..channels {
        let plane = &image.data()[ch * spatial..(ch + 1) * spatial];
        let masked: Vec<f32> =
            plane.iter().enumerate().filter(|(v, _)| in_mask(*v)).map(|(_, &x)| x).collect();
        let lo = percentile(&masked, window_pct);
        let hi = percentile(&masked, 1.0 - window_pct);
        let clamp = |x: f32| x.clamp(lo, hi);

        // Mean/std of the clamped in-mask values, in f64 for stability.
        let n = masked.len() as f64;
        let mean = masked.iter().map(|&x| clamp(x) as f64).sum::<f64>() / n;
        let var =
            masked.iter().map(|&x| (clamp(x) as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std == 0.0 {
            out.extend(std::iter::repeat(0.0f32).take(spatial));
        } else {
            out.extend(plane.iter().map(|&x| (((clamp(x) as f64) - mean) / std) as f32));
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Replace one channel by a constant fill value (missing-modality handling;
/// the default `-4` sits far below anything on the normalized scale).
pub fn fill_missing_channel(image: &Tensor<f32>, channel: usize, fill: f32) -> Result<Tensor<f32>> {
    assert_eq!(image.rank(), 4, "fill_missing_channel wants [C, X, Y, Z]");
    if channel >= image.channels() {
        return Err(Error::ShapeMismatch {
            op: "fill_missing_channel",
            detail: format!("channel {} out of {}", channel, image.channels()),
        });
    }
    let spatial: usize = image.spatial().iter().product();
    let mut data = image.data().to_vec();
    data[channel * spatial..(channel + 1) * spatial].fill(fill);
    Tensor::new(image.shape().to_vec(), data)
}

pub const MISSING_CHANNEL_FILL: f32 = -4.0;
