//! Local structure-aware spiking transformer, from scratch on the CPU.
//!
//! The crate builds up in layers:
//!
//! * [`tensor`]: dense `f32` tensors with reverse-mode differentiation,
//!   convolution and batch normalization kernels;
//! * [`neuron`]: leaky integrate-and-fire dynamics with surrogate
//!   gradients and a relaxed (smooth) mode for gradient checking;
//! * [`pooling`]: max / average pooling and spiking response pooling;
//! * [`attention`]: the local structure-aware spiking self-attention
//!   block: spatial dilated attention, channel recalibration attention,
//!   and spatial-channel decoupled fusion;
//! * [`model`]: spiking tokenizer, encoder stack and classifier head;
//! * [`metrics`]: FLOP counting, firing rates, synaptic-operation and
//!   energy estimates;
//! * [`data`]: synthetic datasets, event binning and the on-disk
//!   container format;
//! * [`train`]: AdamW training loop with a cosine schedule;
//! * [`gradcheck`]: finite-difference verification of every learnable
//!   parameter group;
//! * [`bench`]: complexity scaling harness for the attention block.

pub mod error;
pub mod param;
pub mod rng;
pub mod tensor;

pub mod neuron;
pub mod pooling;

pub mod attention;
pub mod model;

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;

pub mod bench;
pub mod gradcheck;

pub use error::{Error, Result};
pub use tensor::{SpikeTensor, Tape, Tensor};
