//! 2D convolution (grouped and depthwise) over `[N, C, H, W]`.
//!
//! Forward gathers patches im2col-style and multiplies per group. Backward
//! recomputes the patch matrix from the saved input instead of keeping it
//! alive, trading a little compute for memory.

use rayon::prelude::*;

use super::tape::Tape;
use super::Tensor;
use crate::error::Result;
use crate::param::Param;
use crate::rng::XorShift64;
use crate::{config_err, shape_err};

/// Convolution layer: weight `[C_out, C_in/groups, k, k]`, optional bias,
/// and the usual geometry knobs.
pub struct ConvParams {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Kaiming-uniform initialized layer, bias omitted (a batch norm usually
    /// follows).
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut XorShift64,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(config_err!(
                "conv {name}: channels in/out ({c_in}/{c_out}) must divide groups {groups}"
            ));
        }
        let fan_in = (c_in / groups) * kernel * kernel;
        let bound = (1.0 / fan_in as f32).sqrt() * 3.0f32.sqrt();
        let n = c_out * (c_in / groups) * kernel * kernel;
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        let weight = Tensor::new(&[c_out, c_in / groups, kernel, kernel], data)?;
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: None,
            stride,
            padding,
            dilation: 1,
            groups,
        })
    }

    /// Build directly from tensors (tests, fixed kernels).
    pub fn from_weight(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(shape_err!("conv weight must be rank 4, got {:?}", weight.shape()));
        }
        Ok(Self {
            weight: Param::new("conv.weight", weight),
            bias: bias.map(|b| Param::new("conv.bias", b)),
            stride,
            padding,
            dilation,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[2], s[3])
    }

    /// Output spatial extents for an `h x w` input (standard floor formula).
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        if h + 2 * self.padding < span_h || w + 2 * self.padding < span_w {
            return Err(shape_err!(
                "conv: input {h}x{w} (+pad {}) smaller than kernel span {span_h}x{span_w}",
                self.padding
            ));
        }
        Ok((
            (h + 2 * self.padding - span_h) / self.stride + 1,
            (w + 2 * self.padding - span_w) / self.stride + 1,
        ))
    }
}

struct Geometry {
    c_in_g: usize,
    c_out_g: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in_g * self.kh * self.kw
    }
}

/// Gather the patch matrix `[c_in_g*kh*kw, ho*wo]` for one (sample, group).
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let howo = g.ho * g.wo;
    debug_assert_eq!(cols.len(), g.patch_len() * howo);
    let mut row = 0;
    for ci in 0..g.c_in_g {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let dst = &mut cols[row * howo..(row + 1) * howo];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh * g.dilation) as isize - g.padding as isize;
                    let dst_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw * g.dilation) as isize - g.padding as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the patch matrix back into the input plane (backward).
fn col2im(cols: &[f32], g: &Geometry, x_grad: &mut [f32]) {
    let howo = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.c_in_g {
        let plane = &mut x_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let src = &cols[row * howo..(row + 1) * howo];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh * g.dilation) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kw * g.dilation) as isize - g.padding as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        plane[ih as usize * g.w + iw as usize] += src[oh * g.wo + ow];
                    }
                }
                row += 1;
            }
        }
    }
}

/// out[m, p] += sum_s a[m, s] * b[p, s] (both operands row-major, second
/// transposed), accumulating into an existing buffer.
fn gemm_nt_into(a: &[f32], b: &[f32], m: usize, k: usize, p: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// y[co, :] = W[co] . cols  for one (sample, group).
fn conv_forward_group(w: &[f32], cols: &[f32], g: &Geometry, y: &mut [f32]) {
    let howo = g.ho * g.wo;
    let k = g.patch_len();
    for co in 0..g.c_out_g {
        let wrow = &w[co * k..(co + 1) * k];
        let out = &mut y[co * howo..(co + 1) * howo];
        out.fill(0.0);
        for (l, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let col = &cols[l * howo..(l + 1) * howo];
            for (o, &cv) in out.iter_mut().zip(col) {
                *o += wv * cv;
            }
        }
    }
}

impl Tape {
    /// Grouped 2D convolution over `[N, C_in, H, W]`.
    pub fn conv2d(&self, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(shape_err!("conv2d: input must be [N,C,H,W], got {:?}", x.shape()));
        }
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c_in != p.c_in() {
            return Err(shape_err!(
                "conv2d: input channels {c_in} do not match weight ({} x groups {})",
                p.weight.shape()[1],
                p.groups
            ));
        }
        let c_out = p.c_out();
        let (kh, kw) = p.kernel();
        let (ho, wo) = p.out_hw(h, w)?;
        let geom = Geometry {
            c_in_g: c_in / p.groups,
            c_out_g: c_out / p.groups,
            groups: p.groups,
            kh,
            kw,
            h,
            w,
            ho,
            wo,
            stride: p.stride,
            padding: p.padding,
            dilation: p.dilation,
        };

        let weight = p.weight.taped(self);
        let bias = p.bias.as_ref().map(|b| b.taped(self));

        let howo = ho * wo;
        let in_sz = c_in * h * w;
        let out_sz = c_out * howo;
        let wg_sz = geom.c_out_g * geom.patch_len();
        let mut out = vec![0.0f32; n * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(ni, y)| {
            let xn = &x.data()[ni * in_sz..(ni + 1) * in_sz];
            let mut cols = vec![0.0f32; geom.patch_len() * howo];
            for gi in 0..geom.groups {
                im2col(&xn[gi * geom.c_in_g * h * w..], &geom, &mut cols);
                conv_forward_group(
                    &weight.data()[gi * wg_sz..(gi + 1) * wg_sz],
                    &cols,
                    &geom,
                    &mut y[gi * geom.c_out_g * howo..(gi + 1) * geom.c_out_g * howo],
                );
            }
            if let Some(b) = &bias {
                for co in 0..c_out {
                    let bv = b.data()[co];
                    for v in &mut y[co * howo..(co + 1) * howo] {
                        *v += bv;
                    }
                }
            }
        });
        let out = Tensor::new(&[n, c_out, ho, wo], out)?;

        let (xn_node, wn, bn) = (x.node, weight.node, bias.as_ref().and_then(|b| b.node));
        let x_saved = x.clone();
        let w_saved = weight.clone();
        Ok(self.record("conv2d", &[xn_node, wn, bn], out, move |g, sink| {
            let gd = g.data();
            // One pass per sample computes dW partials and dX together so
            // the patch matrix is gathered once. Samples run in parallel;
            // the dW reduction happens afterwards in fixed order.
            let need_w = wn.is_some();
            let need_x = xn_node.is_some();
            if need_w || need_x {
                let mut gx = vec![0.0f32; if need_x { n * in_sz } else { 0 }];
                let mut gx_chunks: Vec<Option<&mut [f32]>> = if need_x {
                    gx.chunks_mut(in_sz).map(Some).collect()
                } else {
                    (0..n).map(|_| None).collect()
                };
                let partials: Vec<Option<Vec<f32>>> = gx_chunks
                    .par_iter_mut()
                    .enumerate()
                    .map(|(ni, gxn)| {
                        let xn = &x_saved.data()[ni * in_sz..(ni + 1) * in_sz];
                        let gy = &gd[ni * out_sz..(ni + 1) * out_sz];
                        let mut cols = vec![0.0f32; geom.patch_len() * howo];
                        let mut gw = if need_w {
                            Some(vec![0.0f32; w_saved.len()])
                        } else {
                            None
                        };
                        for gi in 0..geom.groups {
                            let gy_g = &gy[gi * geom.c_out_g * howo..(gi + 1) * geom.c_out_g * howo];
                            if need_w {
                                im2col(&xn[gi * geom.c_in_g * h * w..], &geom, &mut cols);
                                // dW[co, l] += sum_s gy[co, s] * cols[l, s]
                                let gw = gw.as_mut().expect("gw allocated");
                                gemm_nt_into(
                                    gy_g,
                                    &cols,
                                    geom.c_out_g,
                                    howo,
                                    geom.patch_len(),
                                    &mut gw[gi * wg_sz..(gi + 1) * wg_sz],
                                );
                            }
                            if let Some(gxn) = gxn {
                                // cols_grad = W_g^T . gy_g, scattered back.
                                let cols_grad = super::ops::bgemm(
                                    1,
                                    &w_saved.data()[gi * wg_sz..(gi + 1) * wg_sz],
                                    gy_g,
                                    geom.patch_len(),
                                    geom.c_out_g,
                                    howo,
                                    true,
                                    false,
                                    true,
                                );
                                col2im(&cols_grad, &geom, &mut gxn[gi * geom.c_in_g * h * w..]);
                            }
                        }
                        gw
                    })
                    .collect();
                if need_w {
                    let mut gw = vec![0.0f32; w_saved.len()];
                    for part in partials.into_iter().flatten() {
                        for (d, s) in gw.iter_mut().zip(&part) {
                            *d += s;
                        }
                    }
                    sink.add(wn, Tensor::new(w_saved.shape(), gw).expect("conv dW"));
                }
                if need_x {
                    sink.add(xn_node, Tensor::new(x_saved.shape(), gx).expect("conv dX"));
                }
            }
            if bn.is_some() {
                let mut gb = vec![0.0f64; c_out];
                for ni in 0..n {
                    for co in 0..c_out {
                        let base = ni * out_sz + co * howo;
                        for &v in &gd[base..base + howo] {
                            gb[co] += v as f64;
                        }
                    }
                }
                let gb: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
                sink.add(bn, Tensor::new(&[c_out], gb).expect("conv dB"));
            }
        }))
    }

    /// Depthwise convolution: every channel convolved independently.
    /// Requires `groups == C_in == C_out`.
    pub fn depthwise_conv2d(&self, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(shape_err!(
                "depthwise_conv2d: input must be [N,C,H,W], got {:?}",
                x.shape()
            ));
        }
        let c = x.shape()[1];
        if p.groups != c || p.c_out() != c || p.c_in() != c {
            return Err(config_err!(
                "depthwise_conv2d: groups ({}) and channels in/out ({}/{}) must all equal input channels {c}",
                p.groups,
                p.c_in(),
                p.c_out()
            ));
        }
        self.conv2d(x, p)
    }
}
