//! Leaky integrate-and-fire neuron layer.
//!
//! Dynamics per timestep, given membrane potential `u`, input current `I`,
//! time constant `tau`, threshold `u_th` and resting potential `u_reset`:
//!
//! ```text
//! v  = u + (1/tau) * (I - (u - u_reset))     charging
//! s  = step(v - u_th)                        firing,  step(0) = 1
//! u' = s * u_reset + (1 - s) * v             hard reset
//! ```
//!
//! The step function is non-differentiable; backward uses the arctangent
//! surrogate `g(x) = (w/2) / (1 + (pi*w*x/2)^2)`. Relaxed mode replaces the
//! step with the smooth `(1/pi) * atan(pi*w*x/2) + 1/2`, whose true
//! derivative is the same `g`, which makes finite-difference checks exact.

use std::cell::Cell;
use std::f32::consts::PI;

use crate::error::Result;
use crate::shape_err;
use crate::tensor::{SpikeTensor, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary spikes, surrogate gradient.
    Spiking,
    /// Smooth pseudo-spikes in (0,1); forward and backward agree exactly.
    Relaxed,
}

/// Neuron constants. One instance is shared by all neurons of a layer.
pub struct LIFParams {
    pub tau: f32,
    pub u_th: f32,
    pub u_reset: f32,
    pub surrogate_width: f32,
    pub mode: Cell<SpikeMode>,
    /// In spiking mode, treat the spike as a constant inside the reset
    /// expression so no surrogate gradient flows through the reset product.
    /// Relaxed mode ignores this and differentiates the reset exactly.
    pub detach_reset: bool,
}

impl LIFParams {
    pub fn new(tau: f32, u_th: f32, u_reset: f32, surrogate_width: f32) -> Result<Self> {
        if !(tau > 1.0) {
            return Err(crate::config_err!("lif: tau must be > 1, got {tau}"));
        }
        if !(u_th > u_reset) {
            return Err(crate::config_err!(
                "lif: threshold {u_th} must exceed reset {u_reset}"
            ));
        }
        if !(surrogate_width > 0.0) {
            return Err(crate::config_err!("lif: surrogate width must be positive"));
        }
        Ok(Self {
            tau,
            u_th,
            u_reset,
            surrogate_width,
            mode: Cell::new(SpikeMode::Spiking),
            detach_reset: true,
        })
    }
}

impl Default for LIFParams {
    fn default() -> Self {
        Self::new(2.0, 1.0, 0.0, 2.0).expect("default LIF constants are valid")
    }
}

impl Clone for LIFParams {
    fn clone(&self) -> Self {
        Self {
            tau: self.tau,
            u_th: self.u_th,
            u_reset: self.u_reset,
            surrogate_width: self.surrogate_width,
            mode: Cell::new(self.mode.get()),
            detach_reset: self.detach_reset,
        }
    }
}

/// Membrane potential carried across timesteps, one entry per neuron.
pub struct LIFState {
    pub u: Tensor,
}

impl LIFState {
    pub fn resting(shape: &[usize], p: &LIFParams) -> Self {
        Self {
            u: Tensor::full(shape, p.u_reset),
        }
    }
}

/// Surrogate derivative of the step function.
pub fn surrogate_grad(x: f32, width: f32) -> f32 {
    let z = PI * width * x / 2.0;
    (width / 2.0) / (1.0 + z * z)
}

/// Smooth (relaxed) stand-in for the step function.
pub fn relaxed_step(x: f32, width: f32) -> f32 {
    (PI * width * x / 2.0).atan() / PI + 0.5
}

impl Tape {
    /// Step-function node with a surrogate backward.
    ///
    /// Spiking mode forward: `1[x >= 0]` (fires at exactly zero). Relaxed
    /// mode forward: the arctangent sigmoid above. Both use the surrogate
    /// derivative in backward, which for relaxed mode is the exact one.
    pub fn heaviside_spike(&self, x: &Tensor, width: f32, mode: SpikeMode) -> Tensor {
        let out = match mode {
            SpikeMode::Spiking => x.map(|v| if v >= 0.0 { 1.0 } else { 0.0 }),
            SpikeMode::Relaxed => x.map(|v| relaxed_step(v, width)),
        };
        let xn = x.node;
        let saved = x.clone();
        self.record("heaviside_spike", &[xn], out, move |g, sink| {
            let data = g
                .data()
                .iter()
                .zip(saved.data())
                .map(|(&gv, &xv)| gv * surrogate_grad(xv, width))
                .collect();
            sink.add(xn, Tensor::new(saved.shape(), data).expect("spike backward"));
        })
    }
}

/// One LIF update. Input and state must share a shape; returns the spike
/// map and the next state.
pub fn lif_step(
    tape: &Tape,
    input: &Tensor,
    state: &LIFState,
    p: &LIFParams,
) -> Result<(Tensor, LIFState)> {
    if input.shape() != state.u.shape() {
        return Err(shape_err!(
            "lif_step: input {:?} vs state {:?}",
            input.shape(),
            state.u.shape()
        ));
    }
    // v = u*(1 - 1/tau) + I/tau + u_reset/tau
    let leak = 1.0 - 1.0 / p.tau;
    let v = tape.add(
        &tape.scale_add(&state.u, leak, p.u_reset / p.tau),
        &tape.scale(input, 1.0 / p.tau),
    )?;
    let mode = p.mode.get();
    let spikes = tape.heaviside_spike(&tape.scale_add(&v, 1.0, -p.u_th), p.surrogate_width, mode);

    let next_u = if mode == SpikeMode::Spiking && p.detach_reset {
        // u' = v*(1-s) + u_reset*s with s held constant.
        let keep = spikes.map(|s| 1.0 - s).detach();
        let base = spikes.map(|s| s * p.u_reset).detach();
        tape.add(&tape.mul(&v, &keep)?, &base)?
    } else {
        // Fully differentiable reset.
        let keep = tape.scale_add(&spikes, -1.0, 1.0);
        tape.add(&tape.mul(&v, &keep)?, &tape.scale(&spikes, p.u_reset))?
    };
    Ok((spikes, LIFState { u: next_u }))
}

/// Run the LIF recurrence along the leading timestep axis of `[T, B, ...]`.
/// State starts at rest on every call; it does not persist across calls.
pub fn lif_sequence(tape: &Tape, input: &Tensor, p: &LIFParams) -> Result<SpikeTensor> {
    if input.rank() < 2 {
        return Err(shape_err!(
            "lif_sequence: need [T, B, ...], got {:?}",
            input.shape()
        ));
    }
    let t = input.shape()[0];
    if t == 0 {
        return Err(shape_err!("lif_sequence: zero timesteps"));
    }
    let step_shape: Vec<usize> = std::iter::once(1)
        .chain(input.shape()[1..].iter().copied())
        .collect();
    let mut state = LIFState::resting(&step_shape, p);
    let mut spikes_t = Vec::with_capacity(t);
    for ti in 0..t {
        let i_t = tape.slice_axis(input, 0, ti, 1)?;
        let (s, next) = lif_step(tape, &i_t, &state, p)?;
        spikes_t.push(s);
        state = next;
    }
    let refs: Vec<&Tensor> = spikes_t.iter().collect();
    let out = tape.concat_axis(&refs, 0)?;
    Ok(match p.mode.get() {
        SpikeMode::Spiking => {
            debug_assert!(out.is_binary(), "spiking-mode output must be binary");
            SpikeTensor::from_relaxed(out) // binarity established above
        }
        SpikeMode::Relaxed => SpikeTensor::from_relaxed(out),
    })
}
