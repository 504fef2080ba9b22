//! Naive reference implementations shared by the oracle and acceptance
//! suites. These deliberately mirror the written definitions with plain
//! loops and stay independent of the optimized paths they check.

#![allow(dead_code)]

use lsformer_core::rng::XorShift64;
use lsformer_core::tensor::Tensor;

pub fn random_binary(shape: &[usize], density: f32, rng: &mut XorShift64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.next_f32() < density { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Value at `[t,b,c,i,j]` with zero padding outside the spatial extent.
fn at_padded(x: &Tensor, t: usize, b: usize, c: usize, i: isize, j: isize) -> f32 {
    let (h, w) = (x.shape()[3] as isize, x.shape()[4] as isize);
    if i < 0 || j < 0 || i >= h || j >= w {
        0.0
    } else {
        x.at(&[t, b, c, i as usize, j as usize])
    }
}

/// Per-position gather-then-matmul oracle for the directional (windowed)
/// attention of one group: horizontal plus vertical branch, each scaled.
/// Matches `sda_group` with the depthwise complement disabled.
pub fn naive_sda_directional(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rate: usize,
    window_h: usize,
    window_v: usize,
    scale: f32,
) -> Tensor {
    let (t, b, d, h, w) = (
        q.shape()[0],
        q.shape()[1],
        q.shape()[2],
        q.shape()[3],
        q.shape()[4],
    );
    let mut out = vec![0.0f32; q.len()];
    let r = rate as isize;
    for ti in 0..t {
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    // attention weights per offset, then weighted value sum
                    let mut acc = vec![0.0f32; d];
                    for (axis_w, horizontal) in [(window_h, true), (window_v, false)] {
                        let half = (axis_w / 2) as isize;
                        for off in -half..=half {
                            let (si, sj) = if horizontal {
                                (i as isize, j as isize + off * r)
                            } else {
                                (i as isize + off * r, j as isize)
                            };
                            // q . k_off
                            let mut score = 0.0f32;
                            for c in 0..d {
                                score += q.at(&[ti, bi, c, i, j]) * at_padded(k, ti, bi, c, si, sj);
                            }
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a += score * at_padded(v, ti, bi, c, si, sj) * scale;
                            }
                        }
                    }
                    for c in 0..d {
                        out[(((ti * b + bi) * d + c) * h + i) * w + j] = acc[c];
                    }
                }
            }
        }
    }
    Tensor::new(q.shape(), out).unwrap()
}

/// Per-head loop oracle for channel recalibration attention, computed in
/// the quadratic `(Q K^T) V` association.
pub fn naive_cra(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f32) -> Tensor {
    let (t, b, d, h, w) = (
        q.shape()[0],
        q.shape()[1],
        q.shape()[2],
        q.shape()[3],
        q.shape()[4],
    );
    let n = h * w;
    let dh = d / heads;
    let tok = |x: &Tensor, ti: usize, bi: usize, p: usize, c: usize| {
        x.at(&[ti, bi, c, p / w, p % w])
    };
    let mut out = vec![0.0f32; q.len()];
    for ti in 0..t {
        for bi in 0..b {
            for head in 0..heads {
                let c0 = head * dh;
                // scores[p][p2] = q_p . k_p2 over the head's channels
                for p in 0..n {
                    let mut row = vec![0.0f32; n];
                    for (p2, r) in row.iter_mut().enumerate() {
                        let mut s = 0.0f32;
                        for c in 0..dh {
                            s += tok(q, ti, bi, p, c0 + c) * tok(k, ti, bi, p2, c0 + c);
                        }
                        *r = s;
                    }
                    for c in 0..dh {
                        let mut acc = 0.0f32;
                        for (p2, r) in row.iter().enumerate() {
                            acc += r * tok(v, ti, bi, p2, c0 + c);
                        }
                        out[(((ti * b + bi) * d + c0 + c) * h + p / w) * w + p % w] = acc * scale;
                    }
                }
            }
        }
    }
    Tensor::new(q.shape(), out).unwrap()
}

/// Scalar per-window oracle for spiking response pooling on `[N,C,H,W]`.
pub fn naive_spool(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    lambda: f32,
    gate: f32,
) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = vec![0.0f32; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut mx = 0.0f32; // padding value
                    let mut sum = 0.0f32;
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let i = (oh * stride + kh) as isize - padding as isize;
                            let j = (ow * stride + kw) as isize - padding as isize;
                            let v = if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                                0.0
                            } else {
                                x.at(&[ni, ci, i as usize, j as usize])
                            };
                            mx = mx.max(v);
                            sum += v;
                        }
                    }
                    let avg = sum / (kernel * kernel) as f32;
                    let kept = if avg >= lambda { avg } else { 0.0 };
                    out[((ni * c + ci) * ho + oh) * wo + ow] = mx + gate * kept;
                }
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out).unwrap()
}

/// Direct simulation of how many windows fit: slide until the window
/// leaves the padded extent.
pub fn simulate_pool_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let padded = size + 2 * padding;
    let mut count = 0;
    let mut start = 0;
    while start + kernel <= padded {
        count += 1;
        start += stride;
    }
    count
}
