//! Learnable parameter wrapper.
//!
//! A [`Param`] owns its current value, and hands out a taped view on demand.
//! The view is registered as a leaf exactly once per tape (watch-once), so
//! gradient accumulation lands on a single node even when the parameter is
//! used in several places.

use std::cell::RefCell;

use crate::tensor::{Gradients, Tape, Tensor};

pub struct Param {
    name: String,
    value: RefCell<Tensor>,
    // (tape id, leaf view registered on that tape)
    taped: RefCell<Option<(u64, Tensor)>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: RefCell::new(value.detach()),
            taped: RefCell::new(None),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    /// Snapshot of the current value (cheap: shared buffer).
    pub fn value(&self) -> Tensor {
        self.value.borrow().clone()
    }

    /// Replace the value, e.g. from an optimizer step or checkpoint load.
    /// Invalidates any taped view.
    pub fn set_value(&self, t: Tensor) {
        debug_assert_eq!(self.value.borrow().shape(), t.shape());
        *self.value.borrow_mut() = t.detach();
        *self.taped.borrow_mut() = None;
    }

    /// The value as a leaf of `tape`. Repeated calls on the same tape return
    /// the same node.
    pub fn taped(&self, tape: &Tape) -> Tensor {
        {
            let cached = self.taped.borrow();
            if let Some((id, view)) = cached.as_ref() {
                if *id == tape.id() {
                    return view.clone();
                }
            }
        }
        let view = tape.leaf(self.value.borrow().clone());
        *self.taped.borrow_mut() = Some((tape.id(), view.clone()));
        view
    }

    /// Gradient from the most recent backward pass on the tape this param
    /// was watched on; zeros if the parameter was never reached.
    pub fn grad(&self, grads: &Gradients) -> Tensor {
        let cached = self.taped.borrow();
        match cached.as_ref() {
            Some((_, view)) => grads.wrt(view),
            None => Tensor::zeros(&self.shape()),
        }
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({} {:?})", self.name, self.shape())
    }
}

/// Anything that owns parameters exposes them in a stable order. The order
/// defines checkpoint layout and optimizer-state slots.
pub trait HasParams {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>);

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
