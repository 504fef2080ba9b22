//! Pooling: max, average, and spiking response pooling.
//!
//! Spiking response pooling keeps the max-pool peak and adds back the
//! window's average response when that average clears a threshold `lambda`,
//! gated by `sigmoid(theta)` with a learnable scalar `theta`:
//!
//! ```text
//! avg'(i,j) = avg(i,j)  if avg(i,j) >= lambda, else 0
//! out(i,j)  = max(i,j) + sigmoid(theta) * avg'(i,j)
//! ```
//!
//! Padding contributes zeros to both the max and the average; the average
//! divides by `k*k` unconditionally (count-include-pad). The threshold mask
//! is a constant in backward: gradient reaches the average only on kept
//! windows.

use std::cell::Cell;

use rayon::prelude::*;

use crate::error::Result;
use crate::param::Param;
use crate::shape_err;
use crate::tensor::{Tape, Tensor};

/// Steepness of the smooth threshold used in relaxed mode.
pub const SMOOTH_SELECT_SHARPNESS: f32 = 5.0;

/// Spiking-response-pooling layer configuration. `theta` is learnable; one
/// scalar per layer.
pub struct SPoolingConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub lambda: f32,
    pub theta: Param,
    /// Relaxed mode swaps the hard threshold for a steep sigmoid so the
    /// whole layer is smooth for finite-difference checks, mirroring the
    /// neuron's relaxed dynamics.
    pub relaxed: Cell<bool>,
}

impl SPoolingConfig {
    pub fn new(name: &str, kernel: usize, stride: usize, padding: usize, lambda: f32) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(crate::config_err!("spooling: kernel and stride must be >= 1"));
        }
        if padding + 1 > kernel {
            return Err(crate::config_err!(
                "spooling: padding {padding} must be <= kernel-1 ({})",
                kernel - 1
            ));
        }
        if !(0.0..=1.5).contains(&lambda) {
            return Err(crate::config_err!("spooling: lambda {lambda} outside [0, 1.5]"));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            lambda,
            // theta = 0 so the gate opens at sigmoid(0) = 0.5.
            theta: Param::new(format!("{name}.theta"), Tensor::scalar(0.0)),
            relaxed: Cell::new(false),
        })
    }
}

/// Output extents of a pooled `h x w` map: `floor((x + 2p - k)/s) + 1`.
pub fn pool_output_shape(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(shape_err!(
            "pool: window {kernel} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        ));
    }
    Ok((
        (h + 2 * padding - kernel) / stride + 1,
        (w + 2 * padding - kernel) / stride + 1,
    ))
}

struct PoolGeom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

fn pool_geom(x: &Tensor, k: usize, s: usize, p: usize) -> Result<(usize, PoolGeom)> {
    if x.rank() != 4 {
        return Err(shape_err!("pool: input must be [N,C,H,W], got {:?}", x.shape()));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (ho, wo) = pool_output_shape(h, w, k, s, p)?;
    let planes = x.shape()[0] * x.shape()[1];
    Ok((planes, PoolGeom { h, w, ho, wo, k, s, p }))
}

/// Per-plane max pool; records the flat argmax (usize::MAX when a padding
/// zero wins the window).
fn max_pool_plane(x: &[f32], g: &PoolGeom, out: &mut [f32], argmax: &mut [usize]) {
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            // Padding contributes value 0 (spike absence); start there.
            let mut best = 0.0f32;
            let mut best_ix = usize::MAX;
            for kh in 0..g.k {
                let ih = (oh * g.s + kh) as isize - g.p as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                for kw in 0..g.k {
                    let iw = (ow * g.s + kw) as isize - g.p as isize;
                    if iw < 0 || iw >= g.w as isize {
                        continue;
                    }
                    let ix = ih as usize * g.w + iw as usize;
                    // First strictly-greater element wins; ties keep the
                    // earliest position, padding keeps usize::MAX.
                    if x[ix] > best || (best_ix == usize::MAX && x[ix] >= best) {
                        best = x[ix];
                        best_ix = ix;
                    }
                }
            }
            out[oh * g.wo + ow] = best;
            argmax[oh * g.wo + ow] = best_ix;
        }
    }
}

fn avg_pool_plane(x: &[f32], g: &PoolGeom, out: &mut [f32]) {
    let denom = (g.k * g.k) as f32;
    for oh in 0..g.ho {
        for ow in 0..g.wo {
            let mut acc = 0.0f32;
            for kh in 0..g.k {
                let ih = (oh * g.s + kh) as isize - g.p as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                for kw in 0..g.k {
                    let iw = (ow * g.s + kw) as isize - g.p as isize;
                    if iw < 0 || iw >= g.w as isize {
                        continue;
                    }
                    acc += x[ih as usize * g.w + iw as usize];
                }
            }
            out[oh * g.wo + ow] = acc / denom;
        }
    }
}

impl Tape {
    /// Max pooling over `[N,C,H,W]` with zero-valued padding.
    pub fn max_pool2d(&self, x: &Tensor, k: usize, s: usize, p: usize) -> Result<Tensor> {
        let (planes, geom) = pool_geom(x, k, s, p)?;
        let in_plane = geom.h * geom.w;
        let out_plane = geom.ho * geom.wo;
        let mut out = vec![0.0f32; planes * out_plane];
        let mut argmax = vec![usize::MAX; planes * out_plane];
        out.par_chunks_mut(out_plane)
            .zip(argmax.par_chunks_mut(out_plane))
            .enumerate()
            .for_each(|(pi, (o, am))| {
                max_pool_plane(&x.data()[pi * in_plane..(pi + 1) * in_plane], &geom, o, am);
            });
        let mut shape = x.shape().to_vec();
        shape[2] = geom.ho;
        shape[3] = geom.wo;
        let out = Tensor::new(&shape, out)?;
        let xn = x.node;
        let in_shape = x.shape().to_vec();
        Ok(self.record("max_pool2d", &[xn], out, move |g, sink| {
            let mut gx = vec![0.0f32; planes * in_plane];
            gx.par_chunks_mut(in_plane).enumerate().for_each(|(pi, gp)| {
                for (j, &ix) in argmax[pi * out_plane..(pi + 1) * out_plane].iter().enumerate() {
                    if ix != usize::MAX {
                        gp[ix] += g.data()[pi * out_plane + j];
                    }
                }
            });
            sink.add(xn, Tensor::new(&in_shape, gx).expect("maxpool backward"));
        }))
    }

    /// Average pooling over `[N,C,H,W]`; the divisor is `k*k` including
    /// padded zeros.
    pub fn avg_pool2d(&self, x: &Tensor, k: usize, s: usize, p: usize) -> Result<Tensor> {
        let (planes, geom) = pool_geom(x, k, s, p)?;
        let in_plane = geom.h * geom.w;
        let out_plane = geom.ho * geom.wo;
        let mut out = vec![0.0f32; planes * out_plane];
        out.par_chunks_mut(out_plane).enumerate().for_each(|(pi, o)| {
            avg_pool_plane(&x.data()[pi * in_plane..(pi + 1) * in_plane], &geom, o);
        });
        let mut shape = x.shape().to_vec();
        shape[2] = geom.ho;
        shape[3] = geom.wo;
        let out = Tensor::new(&shape, out)?;
        let xn = x.node;
        let in_shape = x.shape().to_vec();
        let (k, s, p) = (geom.k, geom.s, geom.p);
        let (h, w, ho, wo) = (geom.h, geom.w, geom.ho, geom.wo);
        Ok(self.record("avg_pool2d", &[xn], out, move |g, sink| {
            let denom = (k * k) as f32;
            let mut gx = vec![0.0f32; planes * in_plane];
            gx.par_chunks_mut(in_plane).enumerate().for_each(|(pi, gp)| {
                let go = &g.data()[pi * out_plane..(pi + 1) * out_plane];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = go[oh * wo + ow] / denom;
                        if gv == 0.0 {
                            continue;
                        }
                        for kh in 0..k {
                            let ih = (oh * s + kh) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * s + kw) as isize - p as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                gp[ih as usize * w + iw as usize] += gv;
                            }
                        }
                    }
                }
            });
            sink.add(xn, Tensor::new(&in_shape, gx).expect("avgpool backward"));
        }))
    }

    /// Softmax-weighted window pooling: the smooth relaxed-mode stand-in
    /// for max pooling. Every window position contributes with weight
    /// `softmax(sharpness * value)`; padded positions participate as zeros
    /// exactly like in the hard max.
    pub fn smooth_max_pool2d(
        &self,
        x: &Tensor,
        k: usize,
        s: usize,
        p: usize,
        sharpness: f32,
    ) -> Result<Tensor> {
        let (planes, geom) = pool_geom(x, k, s, p)?;
        let in_plane = geom.h * geom.w;
        let out_plane = geom.ho * geom.wo;
        let win = geom.k * geom.k;
        let mut out = vec![0.0f32; planes * out_plane];
        // Softmax weights and source indices, kept for backward.
        let mut weights = vec![0.0f32; planes * out_plane * win];
        let mut sources = vec![usize::MAX; planes * out_plane * win];
        for pi in 0..planes {
            let xp = &x.data()[pi * in_plane..(pi + 1) * in_plane];
            for oh in 0..geom.ho {
                for ow in 0..geom.wo {
                    let o_ix = pi * out_plane + oh * geom.wo + ow;
                    let mut vals = vec![0.0f32; win];
                    for kh in 0..geom.k {
                        for kw in 0..geom.k {
                            let slot = kh * geom.k + kw;
                            let ih = (oh * geom.s + kh) as isize - geom.p as isize;
                            let iw = (ow * geom.s + kw) as isize - geom.p as isize;
                            if ih < 0 || iw < 0 || ih >= geom.h as isize || iw >= geom.w as isize {
                                vals[slot] = 0.0;
                            } else {
                                let ix = ih as usize * geom.w + iw as usize;
                                vals[slot] = xp[ix];
                                sources[o_ix * win + slot] = ix;
                            }
                        }
                    }
                    let m = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0f64;
                    for &v in &vals {
                        z += ((sharpness * (v - m)) as f64).exp();
                    }
                    let mut smax = 0.0f64;
                    for (slot, &v) in vals.iter().enumerate() {
                        let wgt = ((sharpness * (v - m)) as f64).exp() / z;
                        weights[o_ix * win + slot] = wgt as f32;
                        smax += v as f64 * wgt;
                    }
                    out[o_ix] = smax as f32;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[2] = geom.ho;
        shape[3] = geom.wo;
        let saved_out = out.clone();
        let out = Tensor::new(&shape, out)?;
        let xn = x.node;
        let x_saved = x.clone();
        let in_shape = x.shape().to_vec();
        Ok(self.record("smooth_max_pool2d", &[xn], out, move |g, sink| {
            // d smax / d x_j = w_j * (1 + sharpness * (x_j - smax))
            let mut gx = vec![0.0f32; planes * in_plane];
            for pi in 0..planes {
                let xp = &x_saved.data()[pi * in_plane..(pi + 1) * in_plane];
                let gp = &mut gx[pi * in_plane..(pi + 1) * in_plane];
                for j in 0..out_plane {
                    let o_ix = pi * out_plane + j;
                    let gv = g.data()[o_ix];
                    if gv == 0.0 {
                        continue;
                    }
                    let smax = saved_out[o_ix];
                    for slot in 0..win {
                        let src = sources[o_ix * win + slot];
                        if src == usize::MAX {
                            continue;
                        }
                        let wgt = weights[o_ix * win + slot];
                        gp[src] += gv * wgt * (1.0 + sharpness * (xp[src] - smax));
                    }
                }
            }
            sink.add(xn, Tensor::new(&in_shape, gx).expect("smooth max backward"));
        }))
    }

    /// Spiking response pooling (see module docs). Output is real-valued;
    /// a spiking neuron downstream re-binarizes.
    pub fn spool(&self, x: &Tensor, cfg: &SPoolingConfig) -> Result<Tensor> {
        let x_max = if cfg.relaxed.get() {
            self.smooth_max_pool2d(
                x,
                cfg.kernel,
                cfg.stride,
                cfg.padding,
                SMOOTH_SELECT_SHARPNESS,
            )?
        } else {
            self.max_pool2d(x, cfg.kernel, cfg.stride, cfg.padding)?
        };
        let x_avg = self.avg_pool2d(x, cfg.kernel, cfg.stride, cfg.padding)?;
        let kept = if cfg.relaxed.get() {
            // Smooth selection: sigmoid(k * (avg - lambda)) * avg, fully
            // differentiable for gradient checking.
            let shifted = self.scale_add(
                &x_avg,
                SMOOTH_SELECT_SHARPNESS,
                -SMOOTH_SELECT_SHARPNESS * cfg.lambda,
            );
            let soft_mask = self.sigmoid(&shifted);
            self.mul(&x_avg, &soft_mask)?
        } else {
            // Hard threshold; the mask is constant in backward
            // (straight-through on the selection).
            let mask = x_avg
                .map(|v| if v >= cfg.lambda { 1.0 } else { 0.0 })
                .detach();
            self.mul(&x_avg, &mask)?
        };
        let gate = self.sigmoid(&cfg.theta.taped(self));
        let gated = self.mul(&gate, &kept)?;
        self.add(&x_max, &gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_formula_examples() {
        assert_eq!(pool_output_shape(32, 32, 3, 2, 1).unwrap(), (16, 16));
        assert_eq!(pool_output_shape(5, 7, 1, 1, 0).unwrap(), (5, 7));
        // Two stride-2 poolings: 32 -> 16 -> 8.
        let (h1, _) = pool_output_shape(32, 32, 3, 2, 1).unwrap();
        assert_eq!(pool_output_shape(h1, h1, 3, 2, 1).unwrap(), (8, 8));
    }

    #[test]
    fn window_larger_than_padded_input_errors() {
        assert!(pool_output_shape(2, 2, 5, 1, 1).is_err());
    }

    #[test]
    fn constant_window_max_and_avg() {
        let tape = Tape::no_grad();
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let mx = tape.max_pool2d(&x, 2, 2, 0).unwrap();
        let av = tape.avg_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(mx.data(), &[1.0]);
        assert_eq!(av.data(), &[1.0]);
    }

    #[test]
    fn sparse_window_max_and_avg() {
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mx = tape.max_pool2d(&x, 2, 2, 0).unwrap();
        let av = tape.avg_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(mx.data(), &[1.0]);
        assert_eq!(av.data(), &[0.25]);
    }

    #[test]
    fn max_pool_on_binary_is_binary() {
        let tape = Tape::no_grad();
        let mut rng = crate::rng::XorShift64::new(1);
        let x = Tensor::new(
            &[1, 2, 7, 7],
            (0..98).map(|_| if rng.next_f32() < 0.4 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let y = tape.max_pool2d(&x, 3, 2, 1).unwrap();
        assert!(y.is_binary());
    }

    #[test]
    fn spool_kept_window_adds_gated_average() {
        // Window [1,1;0,0]: avg 0.5 >= 0.3, sigmoid(0)=0.5 -> 1 + 0.25.
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let cfg = SPoolingConfig::new("sp", 2, 2, 0, 0.3).unwrap();
        let y = tape.spool(&x, &cfg).unwrap();
        assert!((y.data()[0] - 1.25).abs() < 1e-6);
    }

    #[test]
    fn spool_filtered_window_is_pure_max() {
        // Window [1,0;0,0]: avg 0.25 < 0.3 -> out = max = 1.
        let tape = Tape::no_grad();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let cfg = SPoolingConfig::new("sp", 2, 2, 0, 0.3).unwrap();
        let y = tape.spool(&x, &cfg).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn lambda_zero_degenerates_to_hybrid_pooling() {
        let tape = Tape::no_grad();
        let mut rng = crate::rng::XorShift64::new(4);
        let x = Tensor::new(
            &[1, 2, 7, 7],
            (0..98).map(|_| if rng.next_f32() < 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let cfg = SPoolingConfig::new("sp", 3, 2, 1, 0.0).unwrap();
        let y = tape.spool(&x, &cfg).unwrap();
        let mx = tape.max_pool2d(&x, 3, 2, 1).unwrap();
        let av = tape.avg_pool2d(&x, 3, 2, 1).unwrap();
        let gate = 0.5f32; // sigmoid(0)
        for ((yv, mv), av) in y.data().iter().zip(mx.data()).zip(av.data()) {
            assert_eq!(*yv, mv + gate * av, "bit-exact hybrid degeneration");
        }
    }

    #[test]
    fn lambda_above_one_on_binary_is_max_pool() {
        let tape = Tape::no_grad();
        let mut rng = crate::rng::XorShift64::new(6);
        let x = Tensor::new(
            &[1, 2, 7, 7],
            (0..98).map(|_| if rng.next_f32() < 0.6 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let cfg = SPoolingConfig::new("sp", 2, 2, 1, 1.01).unwrap();
        let y = tape.spool(&x, &cfg).unwrap();
        let mx = tape.max_pool2d(&x, 2, 2, 1).unwrap();
        assert_eq!(y.data(), mx.data());
    }

    #[test]
    fn spool_dominates_max_pool() {
        let tape = Tape::no_grad();
        let mut rng = crate::rng::XorShift64::new(9);
        let x = Tensor::new(
            &[1, 1, 7, 7],
            (0..49).map(|_| if rng.next_f32() < 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let cfg = SPoolingConfig::new("sp", 3, 1, 1, 0.3).unwrap();
        let y = tape.spool(&x, &cfg).unwrap();
        let mx = tape.max_pool2d(&x, 3, 1, 1).unwrap();
        for (a, b) in y.data().iter().zip(mx.data()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn theta_monotonicity() {
        let tape = Tape::no_grad();
        let mut rng = crate::rng::XorShift64::new(2);
        let x = Tensor::new(
            &[1, 1, 7, 7],
            (0..49).map(|_| if rng.next_f32() < 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let lo = SPoolingConfig::new("sp", 3, 2, 1, 0.3).unwrap();
        lo.theta.set_value(Tensor::scalar(-1.0));
        let hi = SPoolingConfig::new("sp", 3, 2, 1, 0.3).unwrap();
        hi.theta.set_value(Tensor::scalar(2.0));
        let ylo = tape.spool(&x, &lo).unwrap();
        let yhi = tape.spool(&x, &hi).unwrap();
        for (a, b) in yhi.data().iter().zip(ylo.data()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn padding_rejected_when_window_would_be_empty() {
        assert!(SPoolingConfig::new("sp", 1, 1, 1, 0.3).is_err());
    }
}
