//! Adversarial domain adaptation for volumetric segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense tensors, a reverse-mode autodiff tape over the handful
//!   of ops the networks need, SGD with momentum, and checkpoint I/O.
//! * [`net`] — the dual-pathway segmenter, the domain discriminator, and the
//!   multi-connected tap plumbing between them.
//! * [`sampling`] — volume I/O, intensity normalisation, and the two batch
//!   builders (labelled segmentation batches, label-blind adversarial batches).
//! * [`synth`] — a two-domain synthetic dataset generator used by the
//!   end-to-end experiments.
//! * [`train`] — the α schedule, the joint update step, and the epoch loop.
//! * [`eval`] — overlap metrics, dense tiled inference, and the domain probe.
//! * [`runfile`] — resolved run configuration for reproducible replay.

pub mod error;
pub mod eval;
pub mod net;
pub mod runfile;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
