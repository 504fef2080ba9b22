//! Finite-difference gradient verification.
//!
//! For every checked element we compare the analytic gradient against the
//! central difference `(f(x+h) - f(x-h)) / 2h` and report the relative
//! error with a unit floor: `|a-b| / max(|a|, |b|, 1)`. The floor makes the
//! comparison absolute for tiny gradients, where float32 noise would make a
//! strict ratio meaningless.
//!
//! Loss values come from the float64 readout of the loss op, so the
//! difference of nearby losses is not limited by float32 quantization.
//!
//! Conditioning caveat: batch-norm layers whose batch variance is close to
//! zero are legitimately ill-suited to finite differences (the normalizer
//! `1/sqrt(var + eps)` has enormous curvature there), so checks of freshly
//! initialized models can flag such layers on unlucky seeds even though
//! the analytic gradient is exact. Re-seed the model rather than loosening
//! the tolerance.

use crate::error::Result;
use crate::param::Param;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_H: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tol)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn failing(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| g.max_rel_err > self.tol).collect()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn perturbed(base: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut data = base.data().to_vec();
    data[idx] = (data[idx] as f64 + delta) as f32;
    Tensor::new(base.shape(), data).expect("perturbed value keeps shape")
}

/// Deterministically spread `take` indices over `0..n`.
fn spread_indices(n: usize, take: usize) -> Vec<usize> {
    if n <= take {
        return (0..n).collect();
    }
    (0..take).map(|i| i * n / take).collect()
}

/// Check the gradient of a scalar loss w.r.t. every parameter group.
///
/// `forward` must rebuild the whole computation on the given tape and
/// return the loss tensor plus its float64 value. Groups larger than
/// `max_per_group` elements are spot-checked on a deterministic spread.
pub fn check_params<F>(
    params: &[&Param],
    mut forward: F,
    h: f64,
    tol: f64,
    max_per_group: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tape) -> Result<(Tensor, f64)>,
{
    // Analytic pass first; FD passes below re-watch params on fresh tapes.
    let tape = Tape::new();
    let (loss, _) = forward(&tape)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = params.iter().map(|p| p.grad(&grads)).collect();

    let mut groups = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let base = param.value();
        let indices = spread_indices(base.len(), max_per_group);
        let mut max_err = 0.0f64;
        for &idx in &indices {
            param.set_value(perturbed(&base, idx, h));
            let (_, plus) = forward(&Tape::no_grad())?;
            param.set_value(perturbed(&base, idx, -h));
            let (_, minus) = forward(&Tape::no_grad())?;
            param.set_value(base.clone());
            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[pi].data()[idx] as f64;
            max_err = max_err.max(rel_err(fd, an));
        }
        groups.push(GroupReport {
            name: param.name().to_string(),
            max_rel_err: max_err,
            checked: indices.len(),
        });
    }
    Ok(GradCheckReport { groups, tol })
}

/// Test fixture: identity forward whose backward deliberately scales the
/// gradient, used to prove the checker catches a corrupted backward pass.
#[doc(hidden)]
pub fn corrupt_identity(tape: &Tape, x: &Tensor) -> Tensor {
    let xn = x.tape_id();
    let out = x.detach();
    tape.record("corrupt_identity", &[xn], out, move |g, sink| {
        sink.add(xn, g.map(|v| v * 1.5));
    })
}
