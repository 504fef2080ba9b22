//! Dense tensor substrate.
//!
//! A [`Tensor`] is a row-major contiguous buffer of `f32` with up to six
//! axes, immutable after construction. Cloning is cheap (the buffer is
//! behind an `Arc`). A tensor optionally carries the id of the tape node
//! that produced it, which is how values participate in reverse-mode
//! differentiation (see [`tape`]).
//!
//! Model code keeps activations in the `[T, B, C, H, W]` layout and folds
//! the timestep axis into the batch for every stateless operation; only the
//! spiking neuron unfolds time.

pub mod conv;
pub mod norm;
pub mod ops;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::shape_err;

pub use tape::{Gradients, NodeId, Tape};

/// Hard cap on tensor rank. Five axes cover `[T,B,C,H,W]`; the sixth exists
/// for the dilated-window gather, whose output appends a window axis.
pub const MAX_RANK: usize = 6;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(shape_err!("rank {} exceeds max {}", shape.len(), MAX_RANK));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: shape/data consistent")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: shape/data consistent")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Id of the tape node that produced this tensor, if any.
    pub fn tape_id(&self) -> Option<NodeId> {
        self.node
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Tensor {
        self.node = node;
        self
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Element at a full multi-index. Intended for tests and small readers.
    pub fn at(&self, idx: &[usize]) -> f32 {
        debug_assert_eq!(idx.len(), self.rank());
        let s = self.strides();
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off += ix * s[i];
        }
        self.data[off]
    }

    pub fn scalar_value(&self) -> f32 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Single mutable access point. Only safe before the tensor is shared;
    /// used by constructors and optimizer updates.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f32> {
        Arc::make_mut(&mut self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::new(&self.shape, data).expect("map preserves shape")
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if let Some(n) = self.node {
            write!(f, " @node{n}")?;
        }
        Ok(())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// A tensor whose elements are constrained to {0, 1} in spiking mode.
///
/// The wrapper carries the spike-driven contract: layers that must consume
/// spikes take `SpikeTensor`, and the constructor verifies binarity. In
/// relaxed (smooth-surrogate) mode spiking layers produce values in (0, 1);
/// `from_relaxed` skips the check for that case.
#[derive(Clone, Debug)]
pub struct SpikeTensor(Tensor);

impl SpikeTensor {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if !t.is_binary() {
            return Err(Error::Contract(
                "spike tensor contains values outside {0,1}".into(),
            ));
        }
        Ok(SpikeTensor(t))
    }

    /// Wrap without the binarity check (relaxed-mode activations).
    pub fn from_relaxed(t: Tensor) -> Self {
        SpikeTensor(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Fraction of elements equal to 1 (only meaningful on binary content).
    pub fn density(&self) -> f32 {
        let ones: f64 = self.0.data().iter().map(|&v| v as f64).sum();
        (ones / self.0.len() as f64) as f32
    }
}
