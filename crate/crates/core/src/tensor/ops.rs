//! Forward operations with recorded backward closures.
//!
//! Every op validates shapes, computes the forward value, and registers a
//! backward closure on the tape when any input participates. Backward
//! closures only run raw kernels; they never re-enter the tape.
//!
//! Elementwise ops support equal shapes plus scalar (one-element) broadcast
//! on either side; anything richer is out of scope for this engine.

use rayon::prelude::*;

use super::tape::Tape;
use super::{strides_of, Tensor};
use crate::error::Result;
use crate::shape_err;

// ---------------------------------------------------------------------------
// raw kernels shared by forward and backward paths
// ---------------------------------------------------------------------------

/// out[m,p] += a[m,k] * b[k,p], optionally reading a and/or b transposed.
/// Single matrix; caller handles batching.
fn gemm_single(
    out: &mut [f32],
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    p: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * p..(i + 1) * p];
                for l in 0..k {
                    let a_il = a[i * k + l];
                    if a_il == 0.0 {
                        continue;
                    }
                    let b_row = &b[l * p..(l + 1) * p];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += a_il * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b is stored [p, k]; rows of a dot rows of b.
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
        (true, false) => {
            // a is stored [k, m].
            for l in 0..k {
                let b_row = &b[l * p..(l + 1) * p];
                for i in 0..m {
                    let a_li = a[l * m + i];
                    if a_li == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[i * p..(i + 1) * p];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += a_li * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..p {
                    let mut acc = 0.0f32;
                    for l in 0..k {
                        acc += a[l * m + i] * b[j * k + l];
                    }
                    out[i * p + j] += acc;
                }
            }
        }
    }
}

/// Batched GEMM over contiguous matrices. `b_batched == false` reuses the
/// same `b` matrix for every batch element. Parallel over batch; each output
/// element has a fixed sequential reduction order, so results do not depend
/// on thread count.
pub(crate) fn bgemm(
    batch: usize,
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    p: usize,
    ta: bool,
    tb: bool,
    b_batched: bool,
) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m * p];
    let a_sz = m * k;
    let b_sz = k * p;
    out.par_chunks_mut(m * p).enumerate().for_each(|(n, o)| {
        let a_n = &a[n * a_sz..(n + 1) * a_sz];
        let b_n = if b_batched {
            &b[n * b_sz..(n + 1) * b_sz]
        } else {
            b
        };
        gemm_single(o, a_n, b_n, m, k, p, ta, tb);
    });
    out
}

fn permute_raw(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    if rank == 0 {
        return (new_shape, data.to_vec());
    }
    let in_strides = strides_of(shape);
    // Stride in the input for each output axis.
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let last = new_shape[rank - 1].max(1);
    let mut out = vec![0.0f32; n];
    out.par_chunks_mut(last).enumerate().for_each(|(chunk, o)| {
        // Decompose the chunk index over the leading output axes.
        let mut base = 0;
        let mut c = chunk;
        for ax in (0..rank - 1).rev() {
            base += (c % new_shape[ax]) * mapped[ax];
            c /= new_shape[ax];
        }
        let last_stride = mapped[rank - 1];
        for (j, v) in o.iter_mut().enumerate() {
            *v = data[base + j * last_stride];
        }
    });
    (new_shape, out)
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits `shape` at `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

fn slice_axis_raw(
    data: &[f32],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f32> {
    let (outer, extent, inner) = axis_blocks(shape, axis);
    let mut out = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        let src = &data[(o * extent + start) * inner..(o * extent + start + len) * inner];
        out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    out
}

fn scatter_axis_raw(
    grad_out: &[f32],
    full_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f32> {
    let (outer, extent, inner) = axis_blocks(full_shape, axis);
    let mut out = vec![0.0f32; outer * extent * inner];
    for o in 0..outer {
        let dst = &mut out[(o * extent + start) * inner..(o * extent + start + len) * inner];
        dst.copy_from_slice(&grad_out[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

enum Broadcast {
    Equal,
    LeftScalar,
    RightScalar,
}

fn broadcast_spec(a: &Tensor, b: &Tensor, op: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Equal)
    } else if a.len() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.len() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(shape_err!(
            "{op}: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        ))
    }
}

fn sum_to_scalar(g: &[f32]) -> Tensor {
    let s: f64 = g.iter().map(|&v| v as f64).sum();
    Tensor::scalar(s as f32)
}

fn sum_weighted_to_scalar(g: &[f32], w: &[f32]) -> Tensor {
    let s: f64 = g.iter().zip(w).map(|(&gv, &wv)| gv as f64 * wv as f64).sum();
    Tensor::scalar(s as f32)
}

impl Tape {
    /// Elementwise addition (equal shapes or scalar broadcast).
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let spec = broadcast_spec(a, b, "add")?;
        let out = match spec {
            Broadcast::Equal => {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape(), data)?
            }
            Broadcast::LeftScalar => {
                let s = a.scalar_value();
                Tensor::new(b.shape(), b.data().iter().map(|y| s + y).collect())?
            }
            Broadcast::RightScalar => {
                let s = b.scalar_value();
                Tensor::new(a.shape(), a.data().iter().map(|x| x + s).collect())?
            }
        };
        let (an, bn) = (a.node, b.node);
        let (a_len, b_len) = (a.len(), b.len());
        Ok(self.record("add", &[an, bn], out, move |g, sink| {
            if an.is_some() {
                let ga = if a_len == 1 { sum_to_scalar(g.data()) } else { g.clone() };
                sink.add(an, ga);
            }
            if bn.is_some() {
                let gb = if b_len == 1 { sum_to_scalar(g.data()) } else { g.clone() };
                sink.add(bn, gb);
            }
        }))
    }

    /// Elementwise product (equal shapes or scalar broadcast).
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let spec = broadcast_spec(a, b, "mul")?;
        let out = match spec {
            Broadcast::Equal => {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape(), data)?
            }
            Broadcast::LeftScalar => {
                let s = a.scalar_value();
                Tensor::new(b.shape(), b.data().iter().map(|y| s * y).collect())?
            }
            Broadcast::RightScalar => {
                let s = b.scalar_value();
                Tensor::new(a.shape(), a.data().iter().map(|x| x * s).collect())?
            }
        };
        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.clone(), b.clone());
        Ok(self.record("mul", &[an, bn], out, move |g, sink| {
            if an.is_some() {
                let ga = if av.len() == 1 {
                    sum_weighted_to_scalar(g.data(), bv.data())
                } else if bv.len() == 1 {
                    let s = bv.scalar_value();
                    g.map(|v| v * s)
                } else {
                    Tensor::new(
                        g.shape(),
                        g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                    )
                    .expect("mul backward shape")
                };
                sink.add(an, ga);
            }
            if bn.is_some() {
                let gb = if bv.len() == 1 {
                    sum_weighted_to_scalar(g.data(), av.data())
                } else if av.len() == 1 {
                    let s = av.scalar_value();
                    g.map(|v| v * s)
                } else {
                    Tensor::new(
                        g.shape(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )
                    .expect("mul backward shape")
                };
                sink.add(bn, gb);
            }
        }))
    }

    /// out = k * a + c, with constants k and c.
    pub fn scale_add(&self, a: &Tensor, k: f32, c: f32) -> Tensor {
        let out = a.map(|v| k * v + c);
        let an = a.node;
        self.record("scale_add", &[an], out, move |g, sink| {
            sink.add(an, g.map(|v| v * k));
        })
    }

    /// out = k * a.
    pub fn scale(&self, a: &Tensor, k: f32) -> Tensor {
        self.scale_add(a, k, 0.0)
    }

    /// Logistic sigmoid, mapping the reals onto (0, 1).
    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        let out = a.map(|v| 1.0 / (1.0 + (-v).exp()));
        let an = a.node;
        let saved = out.clone();
        self.record("sigmoid", &[an], out, move |g, sink| {
            let data = g
                .data()
                .iter()
                .zip(saved.data())
                .map(|(&gv, &s)| gv * s * (1.0 - s))
                .collect();
            sink.add(an, Tensor::new(saved.shape(), data).expect("sigmoid backward"));
        })
    }

    // -----------------------------------------------------------------------
    // matmul
    // -----------------------------------------------------------------------

    /// Batched matrix product `[..., M, K] x [..., K, P] -> [..., M, P]`.
    /// Leading dims must match, or `b` may be a plain `[K, P]` matrix shared
    /// across the batch.
    pub fn matmul_batched(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || b.rank() < 2 {
            return Err(shape_err!(
                "matmul: operands must have rank >= 2, got {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (kb, p) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if k != kb {
            return Err(shape_err!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let a_batch_dims = &a.shape()[..a.rank() - 2];
        let b_batch_dims = &b.shape()[..b.rank() - 2];
        let b_batched = if b_batch_dims.is_empty() {
            false
        } else if a_batch_dims == b_batch_dims {
            true
        } else {
            return Err(shape_err!(
                "matmul: leading dims must match or b must be unbatched, {:?} x {:?}",
                a.shape(),
                b.shape()
            ));
        };
        let batch: usize = a_batch_dims.iter().product();
        let out_data = bgemm(batch, a.data(), b.data(), m, k, p, false, false, b_batched);
        let mut out_shape = a_batch_dims.to_vec();
        out_shape.push(m);
        out_shape.push(p);
        let out = Tensor::new(&out_shape, out_data)?;

        let (an, bn) = (a.node, b.node);
        let (av, bv) = (a.clone(), b.clone());
        Ok(self.record("matmul", &[an, bn], out, move |g, sink| {
            if an.is_some() {
                // dA = dY * B^T
                let data = bgemm(batch, g.data(), bv.data(), m, p, k, false, true, b_batched);
                sink.add(an, Tensor::new(av.shape(), data).expect("matmul dA shape"));
            }
            if bn.is_some() {
                if b_batched {
                    // dB = A^T * dY, per batch element
                    let data = bgemm(batch, av.data(), g.data(), k, m, p, true, false, true);
                    sink.add(bn, Tensor::new(bv.shape(), data).expect("matmul dB shape"));
                } else {
                    // dB = sum_n A_n^T * dY_n; sequential over batch so the
                    // reduction order is fixed.
                    let mut acc = vec![0.0f32; k * p];
                    for n in 0..batch {
                        gemm_single(
                            &mut acc,
                            &av.data()[n * m * k..(n + 1) * m * k],
                            &g.data()[n * m * p..(n + 1) * m * p],
                            k,
                            m,
                            p,
                            true,
                            false,
                        );
                    }
                    sink.add(bn, Tensor::new(bv.shape(), acc).expect("matmul dB shape"));
                }
            }
        }))
    }

    // -----------------------------------------------------------------------
    // layout
    // -----------------------------------------------------------------------

    /// Reinterpret the buffer under a new shape (no copy).
    pub fn reshape(&self, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != a.len() {
            return Err(shape_err!(
                "reshape: {:?} ({} elems) -> {:?} ({} elems)",
                a.shape(),
                a.len(),
                new_shape,
                n
            ));
        }
        let out = Tensor {
            shape: new_shape.to_vec(),
            data: std::sync::Arc::clone(&a.data),
            node: None,
        };
        let an = a.node;
        let old_shape = a.shape().to_vec();
        Ok(self.record("reshape", &[an], out, move |g, sink| {
            let back = Tensor {
                shape: old_shape.clone(),
                data: std::sync::Arc::clone(&g.data),
                node: None,
            };
            sink.add(an, back);
        }))
    }

    /// Axis permutation (materializes a copy).
    pub fn permute(&self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        if axes.len() != a.rank() {
            return Err(shape_err!(
                "permute: axes {:?} do not match rank {}",
                axes,
                a.rank()
            ));
        }
        let mut seen = vec![false; a.rank()];
        for &ax in axes {
            if ax >= a.rank() || seen[ax] {
                return Err(shape_err!("permute: invalid axes {:?}", axes));
            }
            seen[ax] = true;
        }
        let (new_shape, data) = permute_raw(a.data(), a.shape(), axes);
        let out = Tensor::new(&new_shape, data)?;
        let an = a.node;
        let inv = invert_axes(axes);
        Ok(self.record("permute", &[an], out, move |g, sink| {
            let (_, gdata) = permute_raw(g.data(), g.shape(), &inv);
            let gshape: Vec<usize> = inv.iter().map(|&ax| g.shape()[ax]).collect();
            sink.add(an, Tensor::new(&gshape, gdata).expect("permute backward"));
        }))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= a.rank() || start + len > a.shape()[axis] || len == 0 {
            return Err(shape_err!(
                "slice: axis {axis} range {start}..{} invalid for shape {:?}",
                start + len,
                a.shape()
            ));
        }
        let data = slice_axis_raw(a.data(), a.shape(), axis, start, len);
        let mut new_shape = a.shape().to_vec();
        new_shape[axis] = len;
        let out = Tensor::new(&new_shape, data)?;
        let an = a.node;
        let full_shape = a.shape().to_vec();
        Ok(self.record("slice_axis", &[an], out, move |g, sink| {
            let data = scatter_axis_raw(g.data(), &full_shape, axis, start, len);
            sink.add(an, Tensor::new(&full_shape, data).expect("slice backward"));
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat_axis(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err!("concat: no parts"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(shape_err!("concat: axis {axis} out of range for rank {rank}"));
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(shape_err!("concat: rank mismatch"));
            }
            for ax in 0..rank {
                if ax != axis && p.shape()[ax] != parts[0].shape()[ax] {
                    return Err(shape_err!(
                        "concat: extent mismatch on axis {ax}: {:?} vs {:?}",
                        p.shape(),
                        parts[0].shape()
                    ));
                }
            }
            total += p.shape()[axis];
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut data = vec![0.0f32; outer * total * inner];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let ext = p.shape()[axis];
            for o in 0..outer {
                let dst_base = (o * total + offset) * inner;
                let src_base = o * ext * inner;
                data[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&p.data()[src_base..src_base + ext * inner]);
            }
            spans.push((offset, ext, p.node));
            offset += ext;
        }
        let out = Tensor::new(&out_shape, data)?;
        let input_nodes: Vec<_> = parts.iter().map(|p| p.node).collect();
        let out_shape_saved = out_shape.clone();
        Ok(self.record("concat_axis", &input_nodes, out, move |g, sink| {
            for &(start, len, node) in &spans {
                if node.is_none() {
                    continue;
                }
                let gdata = slice_axis_raw(g.data(), &out_shape_saved, axis, start, len);
                let mut gshape = out_shape_saved.clone();
                gshape[axis] = len;
                sink.add(node, Tensor::new(&gshape, gdata).expect("concat backward"));
            }
        }))
    }

    // -----------------------------------------------------------------------
    // reductions
    // -----------------------------------------------------------------------

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        self.sum_all_f64(a).0
    }

    /// Sum with an exact float64 readout alongside the tensor, for
    /// finite-difference work where float32 loss quantization would
    /// dominate the difference quotient.
    pub fn sum_all_f64(&self, a: &Tensor) -> (Tensor, f64) {
        let s: f64 = a.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        let an = a.node;
        let shape = a.shape().to_vec();
        let taped = self.record("sum_all", &[an], out, move |g, sink| {
            sink.add(an, Tensor::full(&shape, g.scalar_value()));
        });
        (taped, s)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        self.mean_all_f64(a).0
    }

    /// Mean with a float64 readout (see [`Tape::sum_all_f64`]).
    pub fn mean_all_f64(&self, a: &Tensor) -> (Tensor, f64) {
        let n = a.len() as f64;
        let s: f64 = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let out = Tensor::scalar(s as f32);
        let an = a.node;
        let shape = a.shape().to_vec();
        let taped = self.record("mean_all", &[an], out, move |g, sink| {
            sink.add(an, Tensor::full(&shape, g.scalar_value() / n as f32));
        });
        (taped, s)
    }

    /// Mean over the last two (spatial) axes: `[..., H, W] -> [...]`.
    pub fn gap_spatial(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() < 3 {
            return Err(shape_err!("gap: need rank >= 3, got {:?}", a.shape()));
        }
        let hw = a.shape()[a.rank() - 2] * a.shape()[a.rank() - 1];
        let lead: usize = a.shape()[..a.rank() - 2].iter().product();
        let mut data = vec![0.0f32; lead];
        for (i, v) in data.iter_mut().enumerate() {
            let s: f64 = a.data()[i * hw..(i + 1) * hw].iter().map(|&x| x as f64).sum();
            *v = (s / hw as f64) as f32;
        }
        let out_shape = a.shape()[..a.rank() - 2].to_vec();
        let out = Tensor::new(&out_shape, data)?;
        let an = a.node;
        let full_shape = a.shape().to_vec();
        Ok(self.record("gap_spatial", &[an], out, move |g, sink| {
            let mut data = vec![0.0f32; full_shape.iter().product()];
            let scale = 1.0 / hw as f32;
            for (i, &gv) in g.data().iter().enumerate() {
                for v in &mut data[i * hw..(i + 1) * hw] {
                    *v = gv * scale;
                }
            }
            sink.add(an, Tensor::new(&full_shape, data).expect("gap backward"));
        }))
    }

    /// Mean over the leading axis: `[T, ...] -> [...]`.
    pub fn mean_axis0(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 {
            return Err(shape_err!("mean_axis0: need rank >= 2, got {:?}", a.shape()));
        }
        let t = a.shape()[0];
        let rest: usize = a.shape()[1..].iter().product();
        let mut acc = vec![0.0f64; rest];
        for ti in 0..t {
            for (j, v) in a.data()[ti * rest..(ti + 1) * rest].iter().enumerate() {
                acc[j] += *v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| (v / t as f64) as f32).collect();
        let out = Tensor::new(&a.shape()[1..], data)?;
        let an = a.node;
        let full_shape = a.shape().to_vec();
        Ok(self.record("mean_axis0", &[an], out, move |g, sink| {
            let scale = 1.0 / t as f32;
            let mut data = vec![0.0f32; t * rest];
            for ti in 0..t {
                for (j, &gv) in g.data().iter().enumerate() {
                    data[ti * rest + j] = gv * scale;
                }
            }
            sink.add(an, Tensor::new(&full_shape, data).expect("mean_axis0 backward"));
        }))
    }

    /// Add a `[C]` bias to the last axis of `x`.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let c = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err!("add_bias: empty shape"))?;
        if bias.shape() != [c] {
            return Err(shape_err!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                bias.shape(),
                x.shape()
            ));
        }
        let rows = x.len() / c;
        let mut data = x.data().to_vec();
        for r in 0..rows {
            for (v, b) in data[r * c..(r + 1) * c].iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        let (xn, bn) = (x.node, bias.node);
        Ok(self.record("add_bias", &[xn, bn], out, move |g, sink| {
            sink.add(xn, g.clone());
            if bn.is_some() {
                let mut acc = vec![0.0f64; c];
                for r in 0..rows {
                    for (j, &gv) in g.data()[r * c..(r + 1) * c].iter().enumerate() {
                        acc[j] += gv as f64;
                    }
                }
                let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
                sink.add(bn, Tensor::new(&[c], data).expect("bias grad"));
            }
        }))
    }

    // -----------------------------------------------------------------------
    // loss
    // -----------------------------------------------------------------------

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    /// Returns the scalar loss tensor plus a float64 readout of the same
    /// value for finite-difference work.
    pub fn cross_entropy_logits(
        &self,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<(Tensor, f64)> {
        if logits.rank() != 2 {
            return Err(shape_err!(
                "cross_entropy: logits must be [B, C], got {:?}",
                logits.shape()
            ));
        }
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != b {
            return Err(shape_err!(
                "cross_entropy: {} labels for batch {b}",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(shape_err!("cross_entropy: label {bad} >= classes {c}"));
        }
        let mut softmax = vec![0.0f32; b * c];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            let lse = max as f64 + denom.ln();
            loss += lse - row[labels[i]] as f64;
            for (j, &v) in row.iter().enumerate() {
                softmax[i * c + j] = (((v - max) as f64).exp() / denom) as f32;
            }
        }
        loss /= b as f64;
        let out = Tensor::scalar(loss as f32);
        let ln = logits.node;
        let labels = labels.to_vec();
        let shape = logits.shape().to_vec();
        let taped = self.record("cross_entropy", &[ln], out, move |g, sink| {
            let gs = g.scalar_value() / b as f32;
            let mut data = softmax.clone();
            for (i, &y) in labels.iter().enumerate() {
                data[i * c + y] -= 1.0;
            }
            for v in &mut data {
                *v *= gs;
            }
            sink.add(ln, Tensor::new(&shape, data).expect("ce backward"));
        });
        Ok((taped, loss))
    }
}

// Channel-axis wrappers for the `[T, B, C, H, W]` layout.
pub const CHANNEL_AXIS: usize = 2;

impl Tape {
    /// Extract group `m` of `n` equal channel groups from `[T,B,C,H,W]`.
    pub fn slice_channels(&self, x: &Tensor, m: usize, n: usize) -> Result<Tensor> {
        if x.rank() != 5 {
            return Err(shape_err!("slice_channels: need [T,B,C,H,W], got {:?}", x.shape()));
        }
        let c = x.shape()[CHANNEL_AXIS];
        if n == 0 || c % n != 0 {
            return Err(crate::config_err!(
                "slice_channels: channels {c} not divisible by groups {n}"
            ));
        }
        if m >= n {
            return Err(crate::config_err!("slice_channels: group {m} >= groups {n}"));
        }
        let width = c / n;
        self.slice_axis(x, CHANNEL_AXIS, m * width, width)
    }

    /// Concatenate along the channel axis of `[T,B,C,H,W]`.
    pub fn concat_channels(&self, parts: &[&Tensor]) -> Result<Tensor> {
        self.concat_axis(parts, CHANNEL_AXIS)
    }
}
