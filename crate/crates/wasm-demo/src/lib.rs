//! Browser playground for the spiking building blocks.
//!
//! Exposes three interactive operations to JavaScript:
//!
//! * [`lif_trace`]: membrane potential, post-charge potential and spikes
//!   of one leaky integrate-and-fire neuron under constant drive;
//! * [`spool_demo`]: max / average / spiking-response pooling side by
//!   side on a random binary spike map;
//! * [`sda_pattern`]: the dilated horizontal/vertical sampling footprint
//!   of one query position, with attention weights against a random
//!   binary key map.
//!
//! Everything returns plain JSON strings so the page stays framework-free.
//! Build with `wasm-pack build --target web crates/wasm-demo`.

use std::fmt::Write as _;

use wasm_bindgen::prelude::wasm_bindgen;

use lsformer_core::metrics::{energy_snn, sops};
use lsformer_core::neuron::{lif_step, relaxed_step, surrogate_grad, LIFParams, LIFState};
use lsformer_core::pooling::SPoolingConfig;
use lsformer_core::rng::XorShift64;
use lsformer_core::tensor::{Tape, Tensor};

fn json_array(vals: &[f32]) -> String {
    let mut out = String::from("[");
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:.6}");
    }
    out.push(']');
    out
}

fn err_json(msg: &str) -> String {
    format!("{{\"error\":\"{}\"}}", msg.replace('"', "'"))
}

/// Simulate one LIF neuron for `timesteps` steps of constant input
/// current. Returns the charge potential `v`, the stored membrane `u`
/// after reset, the binary spike train, and the surrogate gradient at
/// each step.
#[wasm_bindgen]
pub fn lif_trace(tau: f32, u_th: f32, u_reset: f32, current: f32, timesteps: usize) -> String {
    let params = match LIFParams::new(tau, u_th, u_reset, 2.0) {
        Ok(p) => p,
        Err(e) => return err_json(&e.to_string()),
    };
    let steps = timesteps.clamp(1, 256);
    let tape = Tape::no_grad();
    let mut state = LIFState::resting(&[1, 1], &params);
    let drive = Tensor::full(&[1, 1], current);
    let (mut vs, mut us, mut ss, mut gs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..steps {
        // Recompute v explicitly for the trace.
        let u = state.u.data()[0];
        let v = u + (1.0 / params.tau) * (current - (u - params.u_reset));
        let (s, next) = match lif_step(&tape, &drive, &state, &params) {
            Ok(r) => r,
            Err(e) => return err_json(&e.to_string()),
        };
        vs.push(v);
        us.push(next.u.data()[0]);
        ss.push(s.data()[0]);
        gs.push(surrogate_grad(v - params.u_th, params.surrogate_width));
        state = next;
    }
    format!(
        "{{\"v\":{},\"u\":{},\"spikes\":{},\"surrogate\":{},\"u_th\":{u_th:.4},\"relaxed_at_th\":{:.4}}}",
        json_array(&vs),
        json_array(&us),
        json_array(&ss),
        json_array(&gs),
        relaxed_step(0.0, params.surrogate_width),
    )
}

/// Pool a random binary spike map three ways. Returns the input grid and
/// the max / average / spiking-response pooled grids with their extents.
#[wasm_bindgen]
pub fn spool_demo(
    seed: u32,
    density: f32,
    lambda: f32,
    theta: f32,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> String {
    let size = 8usize;
    let mut rng = XorShift64::new(seed as u64 + 1);
    let data: Vec<f32> = (0..size * size)
        .map(|_| if rng.next_f32() < density.clamp(0.0, 1.0) { 1.0 } else { 0.0 })
        .collect();
    let x = match Tensor::new(&[1, 1, size, size], data.clone()) {
        Ok(t) => t,
        Err(e) => return err_json(&e.to_string()),
    };
    let cfg = match SPoolingConfig::new("demo", kernel, stride, padding, lambda.clamp(0.0, 1.5)) {
        Ok(c) => c,
        Err(e) => return err_json(&e.to_string()),
    };
    cfg.theta.set_value(Tensor::scalar(theta));
    let tape = Tape::no_grad();
    let mx = match tape.max_pool2d(&x, kernel, stride, padding) {
        Ok(t) => t,
        Err(e) => return err_json(&e.to_string()),
    };
    let av = tape.avg_pool2d(&x, kernel, stride, padding).expect("same geometry");
    let sp = tape.spool(&x, &cfg).expect("same geometry");
    let gate = 1.0 / (1.0 + (-theta).exp());
    format!(
        "{{\"size\":{size},\"out_h\":{},\"out_w\":{},\"gate\":{gate:.4},\"input\":{},\"max\":{},\"avg\":{},\"spool\":{}}}",
        mx.shape()[2],
        mx.shape()[3],
        json_array(&data),
        json_array(mx.data()),
        json_array(av.data()),
        json_array(sp.data()),
    )
}

/// Dilated-window sampling footprint of the query at `(qi, qj)` on an
/// `h x w` token grid, plus spike-driven attention weights against a
/// random binary key map (weight = q . k / sqrt(d) at each sampled
/// position for a random binary query vector).
#[wasm_bindgen]
pub fn sda_pattern(
    h: usize,
    w: usize,
    qi: usize,
    qj: usize,
    rate: usize,
    window_h: usize,
    window_v: usize,
    seed: u32,
) -> String {
    if h == 0 || w == 0 || h > 64 || w > 64 {
        return err_json("grid must be within 1..=64");
    }
    if qi >= h || qj >= w {
        return err_json("query position outside the grid");
    }
    if rate == 0 || window_h % 2 == 0 || window_v % 2 == 0 {
        return err_json("rate must be >= 1 and windows odd");
    }
    let d = 16usize;
    let mut rng = XorShift64::new(seed as u64 + 7);
    let mut spikes = |n: usize| -> Vec<f32> {
        (0..n).map(|_| if rng.next_f32() < 0.5 { 1.0 } else { 0.0 }).collect()
    };
    let q: Vec<f32> = spikes(d);
    let keys: Vec<Vec<f32>> = (0..h * w).map(|_| spikes(d)).collect();

    let mut out = String::from("{\"samples\":[");
    let mut first = true;
    let push = |i: isize, j: isize, axis: &str, out: &mut String, first: &mut bool| {
        let inside = i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w;
        let weight: f32 = if inside {
            let k = &keys[i as usize * w + j as usize];
            q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() / (d as f32).sqrt()
        } else {
            0.0
        };
        if !*first {
            out.push(',');
        }
        *first = false;
        let _ = write!(
            out,
            "{{\"i\":{i},\"j\":{j},\"axis\":\"{axis}\",\"inside\":{inside},\"weight\":{weight:.4}}}"
        );
    };
    let half_h = (window_h / 2) as isize;
    for off in -half_h..=half_h {
        push(qi as isize, qj as isize + off * rate as isize, "h", &mut out, &mut first);
    }
    let half_v = (window_v / 2) as isize;
    for off in -half_v..=half_v {
        push(qi as isize + off * rate as isize, qj as isize, "v", &mut out, &mut first);
    }
    let _ = write!(
        out,
        "],\"h\":{h},\"w\":{w},\"qi\":{qi},\"qj\":{qj},\"rate\":{rate}}}"
    );
    out
}

/// Synaptic-operation energy estimate: `fr * T * GFLOPs` at 77 fJ/SOP,
/// handy for the footer readout of the demo page.
#[wasm_bindgen]
pub fn energy_estimate(fr: f64, timesteps: u32, gflops: f64) -> String {
    let s = sops(fr.clamp(0.0, 1.0), timesteps.max(1), (gflops.max(0.0) * 1e9) as u64);
    format!("{{\"sops\":{s:.1},\"energy_j\":{:.6e}}}", energy_snn(s))
}
