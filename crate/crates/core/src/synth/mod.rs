//! Synthetic two-domain dataset generator.
//!
//! Each case is a smooth random background per channel with ellipsoidal
//! "lesions" stamped onto channel 1; the label map is the lesion support.
//! Target-domain cases additionally pass the configured affine intensity
//! shift on one channel *before* normalization, so the two domains share
//! anatomy statistics but differ in the contrast of the shifted channel
//! (a negative gain inverts lesion contrast there).
//!
//! Generation is pure per `(config, domain, case index)`: every case gets
//! its own counter-derived rng stream, so cases can be produced in any
//! order or in parallel with identical results.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{
    normalize_volume, save_image, save_labels, save_manifest, CaseRecord, Domain, ManifestEntry,
    INTENSITY_WINDOW,
};
use crate::tensor::{LabelGrid, Tensor};

/// Linear size of the coarse noise grid cell (voxels per cell).
pub const COARSE_FACTOR: usize = 8;

/// Smallest volume the default segmenter can take a training segment from.
pub const MIN_VOLUME_EXTENT: usize = 25;

/// Affine intensity transform applied to one channel of target cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub channel: usize,
    pub gain: f64,
    pub bias: f64,
}

impl Default for DomainShift {
    /// Contrast inversion with damping on channel 1.
    fn default() -> Self {
        DomainShift { channel: 1, gain: -0.8, bias: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Cubic volume side length.
    pub extent: usize,
    pub channels: usize,
    pub source_cases: usize,
    pub target_cases: usize,
    /// Inclusive range for the number of lesions per case.
    pub lesion_count: [usize; 2],
    /// Inclusive range for per-axis lesion radii, in voxels.
    pub lesion_radius: [f64; 2],
    /// Intensity added on channel 1 inside lesions (pre-shift).
    pub lesion_offset: f64,
    /// Std of the per-voxel noise on top of the smooth background.
    pub noise_std: f64,
    /// Quadratic skew of the smooth background: v -> v + skew * v^2.
    /// Makes the field distribution asymmetric, so a sign-flipping shift
    /// stays detectable after per-volume standardization.
    pub field_skew: f64,
    /// Target-domain transform; `None` generates identically-distributed
    /// domains (used to check the generator adds no spurious cue).
    pub shift: Option<DomainShift>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            extent: 48,
            channels: 2,
            source_cases: 20,
            target_cases: 12,
            lesion_count: [2, 5],
            lesion_radius: [3.0, 6.0],
            lesion_offset: 1.8,
            noise_std: 0.15,
            field_skew: 0.35,
            shift: Some(DomainShift::default()),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.extent < MIN_VOLUME_EXTENT {
            return fail(format!(
                "extent {} below minimum segmenter input {}",
                self.extent, MIN_VOLUME_EXTENT
            ));
        }
        if self.channels < 2 {
            return fail(format!("need at least 2 channels, got {}", self.channels));
        }
        if self.source_cases == 0 || self.target_cases == 0 {
            return fail("each domain needs at least one case".into());
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return fail(format!("lesion count range {:?} is inverted", self.lesion_count));
        }
        let [r_min, r_max] = self.lesion_radius;
        if !(r_min > 0.0 && r_min <= r_max) {
            return fail(format!("lesion radius range {:?} is invalid", self.lesion_radius));
        }
        if 2.0 * r_max >= self.extent as f64 {
            return fail(format!(
                "lesion radius {} does not fit in extent {}",
                r_max, self.extent
            ));
        }
        if let Some(s) = self.shift {
            if s.channel >= self.channels {
                return fail(format!(
                    "shift channel {} out of range for {} channels",
                    s.channel, self.channels
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Lesion {
    center: [f64; 3],
    radii: [f64; 3],
}

fn draw_lesions(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Lesion> {
    let count = rng.gen_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);
    let [r_min, r_max] = cfg.lesion_radius;
    (0..count)
        .map(|_| {
            let radii = [
                rng.gen_range(r_min..=r_max),
                rng.gen_range(r_min..=r_max),
                rng.gen_range(r_min..=r_max),
            ];
            let center = std::array::from_fn(|a| {
                rng.gen_range(radii[a]..=(cfg.extent as f64 - radii[a]))
            });
            Lesion { center, radii }
        })
        .collect()
}

fn lesion_support(extent: usize, lesions: &[Lesion]) -> LabelGrid {
    let mut data = vec![0u8; extent * extent * extent];
    for l in lesions {
        // Bounding box keeps stamping cheap.
        let lo: Vec<usize> =
            (0..3).map(|a| (l.center[a] - l.radii[a]).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> =
            (0..3).map(|a| ((l.center[a] + l.radii[a]).ceil() as usize).min(extent - 1)).collect();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let d: f64 = [x, y, z]
                        .iter()
                        .enumerate()
                        .map(|(a, &v)| {
                            let t = (v as f64 + 0.5 - l.center[a]) / l.radii[a];
                            t * t
                        })
                        .sum();
                    if d <= 1.0 {
                        data[(x * extent + y) * extent + z] = 1;
                    }
                }
            }
        }
    }
    LabelGrid::new([extent, extent, extent], data).expect("support shape")
}

/// Smooth skewed field: trilinear interpolation of a coarse Gaussian grid.
fn smooth_field(extent: usize, skew: f64, rng: &mut impl Rng) -> Vec<f64> {
    let cells = extent.div_ceil(COARSE_FACTOR);
    let g = cells + 1; // grid points per axis
    let coarse: Vec<f64> = (0..g * g * g)
        .map(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            v + skew * v * v
        })
        .collect();
    let at = |x: usize, y: usize, z: usize| coarse[(x * g + y) * g + z];
    let mut field = Vec::with_capacity(extent * extent * extent);
    for x in 0..extent {
        let (cx, fx) = (x / COARSE_FACTOR, (x % COARSE_FACTOR) as f64 / COARSE_FACTOR as f64);
        for y in 0..extent {
            let (cy, fy) = (y / COARSE_FACTOR, (y % COARSE_FACTOR) as f64 / COARSE_FACTOR as f64);
            for z in 0..extent {
                let (cz, fz) =
                    (z / COARSE_FACTOR, (z % COARSE_FACTOR) as f64 / COARSE_FACTOR as f64);
                let mut v = 0.0;
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                            v += wx * wy * wz * at(cx + dx, cy + dy, cz + dz);
                        }
                    }
                }
                field.push(v);
            }
        }
    }
    field
}

fn stream_id(domain: Domain, case_index: usize) -> u64 {
    ((domain.label() as u64) << 32) | case_index as u64
}

pub fn case_id(domain: Domain, case_index: usize) -> String {
    format!("{}{:02}", domain.tag().to_lowercase(), case_index + 1)
}

/// Pre-normalization image + labels (exposed for generator tests).
fn gen_case_raw(
    cfg: &SynthConfig,
    domain: Domain,
    case_index: usize,
) -> (Tensor<f32>, LabelGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream_id(domain, case_index));
    let lesions = draw_lesions(cfg, &mut rng);
    let labels = lesion_support(cfg.extent, &lesions);
    let spatial = cfg.extent.pow(3);
    let mut data = Vec::with_capacity(cfg.channels * spatial);
    for ch in 0..cfg.channels {
        let field = smooth_field(cfg.extent, cfg.field_skew, &mut rng);
        let mut plane: Vec<f64> = field
            .iter()
            .map(|&v| v + cfg.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        if ch == 1 {
            for (p, &l) in plane.iter_mut().zip(labels.data().iter()) {
                if l != 0 {
                    *p += cfg.lesion_offset;
                }
            }
        }
        if domain == Domain::Target {
            if let Some(s) = cfg.shift {
                if s.channel == ch {
                    for p in plane.iter_mut() {
                        *p = s.gain * *p + s.bias;
                    }
                }
            }
        }
        data.extend(plane.iter().map(|&v| v as f32));
    }
    let extent = cfg.extent;
    let image = Tensor::new(vec![cfg.channels, extent, extent, extent], data).expect("image shape");
    (image, labels)
}

/// Generate one normalized case. Pure in `(config, domain, case_index)`.
pub fn gen_case(cfg: &SynthConfig, domain: Domain, case_index: usize) -> Result<CaseRecord> {
    cfg.validate()?;
    let (raw, labels) = gen_case_raw(cfg, domain, case_index);
    let image = normalize_volume(&raw, None, INTENSITY_WINDOW)?;
    CaseRecord::new(case_id(domain, case_index), image, Some(labels), None, domain)
}

/// Generate the full two-domain dataset under `out_dir`; returns the
/// manifest path. Every case (including target) is written with labels —
/// whether a trainer may read them is its mode's concern, not the data's.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let jobs: Vec<(Domain, usize)> = (0..cfg.source_cases)
        .map(|i| (Domain::Source, i))
        .chain((0..cfg.target_cases).map(|i| (Domain::Target, i)))
        .collect();
    let cases: Vec<CaseRecord> = jobs
        .par_iter()
        .map(|&(domain, i)| gen_case(cfg, domain, i))
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in &cases {
        let image_name = format!("{}.json", case.case_id);
        let labels_name = format!("{}_labels.json", case.case_id);
        save_image(&out_dir.join(&image_name), &case.image, case.domain)?;
        save_labels(&out_dir.join(&labels_name), case.labels.as_ref().unwrap(), case.domain)?;
        entries.push(ManifestEntry {
            case_id: case.case_id.clone(),
            image: image_name,
            labels: Some(labels_name),
            mask: None,
            domain: case.domain,
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&manifest_path, &entries)?;
    Ok(manifest_path)
}
