//! Reverse-mode differentiation tape.
//!
//! Operations record one node each: an op label, the ids of taped inputs,
//! and a backward closure that holds whatever forward context the gradient
//! needs. Node ids grow monotonically, so creation order is a topological
//! order and the backward sweep is a single reverse pass that touches each
//! node exactly once.
//!
//! A tape is single-writer: recording and `backward` must not interleave
//! with each other on separate threads. Distinct tapes are independent.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    op: &'static str,
    inputs: Vec<NodeId>,
    back: Option<BackFn>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    /// A recording tape for training / gradient checks.
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A non-recording tape: ops run normally but produce untaped outputs.
    pub fn no_grad() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Op label of a node, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes.borrow()[id].op
    }

    /// Input node ids of a node, for diagnostics and topology tests.
    pub fn node_inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.borrow()[id].inputs.clone()
    }

    /// Register `t` as a differentiable leaf (a parameter or input).
    pub fn leaf(&self, t: Tensor) -> Tensor {
        if !self.recording {
            return t.with_node(None);
        }
        let id = self.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            back: None,
        });
        t.with_node(Some(id))
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        id
    }

    /// Attach a node to `out` if recording and any input is taped. The
    /// backward closure receives the output gradient and a sink to route
    /// contributions into; it must not call tape ops.
    pub(crate) fn record(
        &self,
        op: &'static str,
        input_nodes: &[Option<NodeId>],
        out: Tensor,
        back: impl Fn(&Tensor, &mut GradSink) + 'static,
    ) -> Tensor {
        if !self.recording || input_nodes.iter().all(|n| n.is_none()) {
            return out.with_node(None);
        }
        let inputs: Vec<NodeId> = input_nodes.iter().filter_map(|n| *n).collect();
        let id = self.push(Node {
            op,
            inputs,
            back: Some(Box::new(back)),
        });
        out.with_node(Some(id))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// reachable from the loss; query leaves through [`Gradients`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = loss.node.ok_or_else(|| {
            Error::Contract("backward: loss tensor is not on this tape".into())
        })?;
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        if loss_id >= nodes.len() {
            return Err(Error::Contract("backward: loss node id out of range".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss_id] = Some(Tensor::ones(loss.shape()));

        for id in (0..=loss_id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                // Cheap clone: the gradient buffer is Arc-shared.
                let g = grads[id].clone().expect("checked above");
                let mut sink = GradSink { grads: &mut grads };
                back(&g, &mut sink);
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulates gradient contributions during the backward sweep.
pub struct GradSink<'a> {
    grads: &'a mut Vec<Option<Tensor>>,
}

impl GradSink<'_> {
    /// Add `contribution` to the gradient of `node`. Contributions for
    /// untaped inputs (`None`) are dropped.
    pub fn add(&mut self, node: Option<NodeId>, contribution: Tensor) {
        let Some(id) = node else { return };
        match &mut self.grads[id] {
            slot @ None => *slot = Some(contribution),
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contribution.shape());
                let buf = existing.data_mut();
                for (dst, src) in buf.iter_mut().zip(contribution.data()) {
                    *dst += src;
                }
            }
        }
    }
}

/// Result of a backward pass: node id -> gradient tensor.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn by_node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss w.r.t. `t`, if `t` is taped and was reached.
    pub fn of(&self, t: &Tensor) -> Option<&Tensor> {
        t.node.and_then(|id| self.by_node(id))
    }

    /// Like [`Gradients::of`] but materializes zeros for unreached leaves.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match self.of(t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }
}
