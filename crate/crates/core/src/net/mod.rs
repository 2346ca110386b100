//! Network architectures: segmenter, discriminator, tap plumbing.

pub mod discriminator;
pub mod segmenter;
pub mod spec;
pub mod taps;

pub use discriminator::{domain_prediction, BoundDiscriminator, Discriminator};
pub use segmenter::{BoundSegmenter, SegForward, Segmenter};
pub use spec::{DiscriminatorSpec, LayerSpec, SegGeometry, SegmenterSpec};
pub use taps::{TapPathway, TapPoint, TapSet};
