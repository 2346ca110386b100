//! Data loading, normalization, and batch sampling.
//!
//! Cases are whole volumes ([`CaseRecord`]); training consumes centered
//! multi-scale segments drawn from them. Intensity normalization happens
//! once per case at load time, sampling happens per batch.

pub mod batch;
pub mod case;
pub mod io;
pub mod normalize;
pub mod segment;

pub use batch::{build_adv_batch, build_seg_batch, foreground_quota, AdvBatch, FgIndex, SegBatch};
pub use case::{CaseRecord, Domain, ImageView};
pub use io::{
    load_case, load_dataset, load_image, load_labels, load_manifest, save_image, save_labels,
    save_manifest, ManifestEntry, VolumeMeta,
};
pub use normalize::{
    fill_missing_channel, normalize_volume, percentile, INTENSITY_WINDOW, MISSING_CHANNEL_FILL,
};
pub use segment::{extract_image_patches, extract_segment, patch_start, SegmentSample};
