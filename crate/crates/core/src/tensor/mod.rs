//! Dense tensors and reverse-mode autodiff.

pub mod checkpoint;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

pub use optim::SgdMomentum;
pub use params::{GradStore, ParamId, ParamSet};
pub use tape::{Tape, Var};

/// Scalar element type for tensors. `f32` is the working precision; `f64` is
/// used as a shadow precision by the gradient checks.
pub trait Element:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Immutable dense tensor in row-major order. Cloning is cheap (shared data).
///
/// Rank conventions used throughout the crate: feature maps are rank 4
/// `[channels, x, y, z]`, conv kernels are rank 5
/// `[out_ch, in_ch, k, k, k]`, and losses are rank 0.
#[derive(Clone, Debug)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![E::zero(); numel]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]) }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: E) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new((0..numel).map(|i| f(i)).collect()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// The single element of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel count of a rank-4 feature map.
    pub fn channels(&self) -> usize {
        assert_eq!(self.rank(), 4, "channels() on tensor with shape {:?}", self.shape);
        self.shape[0]
    }

    /// Spatial extent of a rank-4 feature map.
    pub fn spatial(&self) -> [usize; 3] {
        assert_eq!(self.rank(), 4, "spatial() on tensor with shape {:?}", self.shape);
        [self.shape[1], self.shape[2], self.shape[3]]
    }
}

impl<E: Element> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Dense `u8` voxel grid, used for segmentation labels and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    shape: [usize; 3],
    data: Arc<Vec<u8>>,
}

impl LabelGrid {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let numel = shape.iter().product::<usize>();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "label_grid_new",
                detail: format!("shape {:?} wants {} voxels, got {}", shape, numel, data.len()),
            });
        }
        Ok(LabelGrid { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelGrid { shape, data: Arc::new(vec![0; shape.iter().product()]) }
    }

    pub fn full(shape: [usize; 3], value: u8) -> Self {
        LabelGrid { shape, data: Arc::new(vec![value; shape.iter().product()]) }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}
