//! Local structure-aware spiking self-attention.
//!
//! One block, given a binary input `X [T,B,D,H,W]`:
//!
//! 1. shared spike-form projections `Q/K/V = SN(BN(Conv1x1(X)))`;
//! 2. channel split into `N` groups of width `d = D/N`, group `m` carrying
//!    its own dilation rate `r_m`;
//! 3. spatial dilated attention (SDA) per group: every position attends to
//!    a horizontal and a vertical window of keys/values sampled at spacing
//!    `r_m` (out-of-bounds samples are zero), each direction scaled by
//!    `1/sqrt(d)`, no softmax, plus a depthwise-conv complement on `V`;
//! 4. channel recalibration attention (CRA) per group: spatial positions
//!    flatten to tokens, heads of width `d/n` compute `Q (K^T V) / sqrt(d)`
//!    (the `[d/n x d/n]` association keeps the cost linear in tokens);
//! 5. spatial-channel decoupled fusion (SCDF): per group concatenate
//!    `alpha_m * sda` and `beta_m * cra` along channels, concatenate the
//!    groups, then spike + 1x1 projection `2D -> D` + batch norm.

use crate::error::Result;
use crate::metrics::{count_flops, LayerDescriptor, Probe};
use crate::neuron::{lif_sequence, LIFParams};
use crate::param::{HasParams, Param};
use crate::rng::XorShift64;
use crate::tensor::conv::ConvParams;
use crate::tensor::norm::BatchNormParams;
use crate::tensor::{SpikeTensor, Tape, Tensor};
use crate::{config_err, shape_err};

/// Sampling direction of a dilated window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowAxis {
    Horizontal,
    Vertical,
}

/// Attention hyperparameters shared by every encoder block.
#[derive(Debug, Clone)]
pub struct LSSSAConfig {
    pub embed_dim: usize,
    pub groups: usize,
    pub dilation_rates: Vec<usize>,
    pub window_h: usize,
    pub window_v: usize,
    /// CRA heads per group.
    pub heads: usize,
    pub dwc_kernel: usize,
    // Ablation switches.
    pub enable_sda: bool,
    pub enable_cra: bool,
    /// When off, fusion drops the learnable alpha/beta and concatenates the
    /// branches with equal fixed weight (the coupled variant).
    pub enable_scdf: bool,
    pub enable_dwc: bool,
}

impl LSSSAConfig {
    pub fn new(embed_dim: usize, groups: usize, dilation_rates: Vec<usize>) -> Result<Self> {
        let mut cfg = Self {
            embed_dim,
            groups,
            dilation_rates,
            window_h: 3,
            window_v: 3,
            heads: 0,
            dwc_kernel: 3,
            enable_sda: true,
            enable_cra: true,
            enable_scdf: true,
            enable_dwc: true,
        };
        // Default head count keeps the per-head width at 16 channels.
        cfg.heads = (cfg.group_dim()? / 16).clamp(1, 8);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn group_dim(&self) -> Result<usize> {
        if self.groups == 0 || self.embed_dim % self.groups != 0 {
            return Err(config_err!(
                "attention: embed dim {} not divisible by groups {}",
                self.embed_dim,
                self.groups
            ));
        }
        Ok(self.embed_dim / self.groups)
    }

    /// Per-branch attention scale `1/sqrt(d)`.
    pub fn scale(&self) -> Result<f32> {
        Ok(1.0 / (self.group_dim()? as f32).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.group_dim()?;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(config_err!(
                "attention: group width {d} not divisible by heads {}",
                self.heads
            ));
        }
        if self.dilation_rates.len() != self.groups {
            return Err(config_err!(
                "attention: {} dilation rates for {} groups",
                self.dilation_rates.len(),
                self.groups
            ));
        }
        if self.dilation_rates.iter().any(|&r| r == 0) {
            return Err(config_err!("attention: dilation rates must be >= 1"));
        }
        for (name, w) in [("horizontal", self.window_h), ("vertical", self.window_v)] {
            if w == 0 || w % 2 == 0 {
                return Err(config_err!("attention: {name} window must be odd, got {w}"));
            }
        }
        if self.dwc_kernel % 2 == 0 {
            return Err(config_err!("attention: dwc kernel must be odd"));
        }
        Ok(())
    }

    /// Rates above 3 sample too sparsely on small token grids; allowed,
    /// but flagged for the caller to warn about.
    pub fn oversized_rates(&self) -> Vec<usize> {
        self.dilation_rates.iter().copied().filter(|&r| r > 3).collect()
    }
}

/// The shared Q/K/V projection: per matrix a 1x1 conv, batch norm and a
/// spiking neuron layer.
pub struct QKVProjection {
    pub conv_q: ConvParams,
    pub conv_k: ConvParams,
    pub conv_v: ConvParams,
    pub bn_q: BatchNormParams,
    pub bn_k: BatchNormParams,
    pub bn_v: BatchNormParams,
    pub sn_q: LIFParams,
    pub sn_k: LIFParams,
    pub sn_v: LIFParams,
}

impl QKVProjection {
    pub fn new(name: &str, dim: usize, lif: &LIFParams, rng: &mut XorShift64) -> Result<Self> {
        Ok(Self {
            conv_q: ConvParams::new(&format!("{name}.q.conv"), dim, dim, 1, 1, 0, 1, rng)?,
            conv_k: ConvParams::new(&format!("{name}.k.conv"), dim, dim, 1, 1, 0, 1, rng)?,
            conv_v: ConvParams::new(&format!("{name}.v.conv"), dim, dim, 1, 1, 0, 1, rng)?,
            bn_q: BatchNormParams::new(&format!("{name}.q.bn"), dim),
            bn_k: BatchNormParams::new(&format!("{name}.k.bn"), dim),
            bn_v: BatchNormParams::new(&format!("{name}.v.bn"), dim),
            sn_q: lif.clone(),
            sn_k: lif.clone(),
            sn_v: lif.clone(),
        })
    }
}

/// Per-group depthwise complement on V: depthwise conv + batch norm.
pub struct SDAGroupParams {
    pub dwc: ConvParams,
    pub bn: BatchNormParams,
}

impl SDAGroupParams {
    pub fn new(name: &str, dim: usize, kernel: usize, rng: &mut XorShift64) -> Result<Self> {
        Ok(Self {
            dwc: ConvParams::new(
                &format!("{name}.dwc"),
                dim,
                dim,
                kernel,
                1,
                kernel / 2,
                dim,
                rng,
            )?,
            bn: BatchNormParams::new(&format!("{name}.dwc.bn"), dim),
        })
    }
}

/// All learnable state of one attention block.
pub struct LsssaParams {
    pub cfg: LSSSAConfig,
    pub qkv: QKVProjection,
    pub sda_groups: Vec<SDAGroupParams>,
    /// Per-group spatial-branch weights, 0.5 at init.
    pub alpha: Vec<Param>,
    /// Per-group channel-branch weights, 0.5 at init.
    pub beta: Vec<Param>,
    pub sn_fuse: LIFParams,
    pub out_conv: ConvParams,
    pub out_bn: BatchNormParams,
}

impl LsssaParams {
    pub fn new(name: &str, cfg: LSSSAConfig, lif: &LIFParams, rng: &mut XorShift64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.group_dim()?;
        let qkv = QKVProjection::new(name, cfg.embed_dim, lif, rng)?;
        let mut sda_groups = Vec::with_capacity(cfg.groups);
        let mut alpha = Vec::with_capacity(cfg.groups);
        let mut beta = Vec::with_capacity(cfg.groups);
        for m in 0..cfg.groups {
            sda_groups.push(SDAGroupParams::new(
                &format!("{name}.g{m}"),
                d,
                cfg.dwc_kernel,
                rng,
            )?);
            alpha.push(Param::new(format!("{name}.g{m}.alpha"), Tensor::scalar(0.5)));
            beta.push(Param::new(format!("{name}.g{m}.beta"), Tensor::scalar(0.5)));
        }
        let out_conv = ConvParams::new(
            &format!("{name}.out.conv"),
            2 * cfg.embed_dim,
            cfg.embed_dim,
            1,
            1,
            0,
            1,
            rng,
        )?;
        let out_bn = BatchNormParams::new(&format!("{name}.out.bn"), cfg.embed_dim);
        Ok(Self {
            cfg,
            qkv,
            sda_groups,
            alpha,
            beta,
            sn_fuse: lif.clone(),
            out_conv,
            out_bn,
        })
    }

    pub fn set_training(&self, training: bool) {
        for bn in [
            &self.qkv.bn_q,
            &self.qkv.bn_k,
            &self.qkv.bn_v,
            &self.out_bn,
        ] {
            bn.training.set(training);
        }
        for g in &self.sda_groups {
            g.bn.training.set(training);
        }
    }

    pub fn set_mode(&self, mode: crate::neuron::SpikeMode) {
        self.qkv.sn_q.mode.set(mode);
        self.qkv.sn_k.mode.set(mode);
        self.qkv.sn_v.mode.set(mode);
        self.sn_fuse.mode.set(mode);
    }
}

impl HasParams for LsssaParams {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for conv in [&self.qkv.conv_q, &self.qkv.conv_k, &self.qkv.conv_v] {
            out.push(&conv.weight);
            if let Some(b) = &conv.bias {
                out.push(b);
            }
        }
        for bn in [&self.qkv.bn_q, &self.qkv.bn_k, &self.qkv.bn_v] {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        for g in &self.sda_groups {
            out.push(&g.dwc.weight);
            out.push(&g.bn.gamma);
            out.push(&g.bn.beta);
        }
        for (a, b) in self.alpha.iter().zip(&self.beta) {
            out.push(a);
            out.push(b);
        }
        out.push(&self.out_conv.weight);
        out.push(&self.out_bn.gamma);
        out.push(&self.out_bn.beta);
    }
}

/// Apply a stateless `[N,C,H,W]` function under a folded timestep axis.
pub(crate) fn fold_time<F>(tape: &Tape, x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&Tape, &Tensor) -> Result<Tensor>,
{
    if x.rank() != 5 {
        return Err(shape_err!("fold_time: need [T,B,C,H,W], got {:?}", x.shape()));
    }
    let (t, b) = (x.shape()[0], x.shape()[1]);
    let folded_shape: Vec<usize> = std::iter::once(t * b)
        .chain(x.shape()[2..].iter().copied())
        .collect();
    let folded = tape.reshape(x, &folded_shape)?;
    let y = f(tape, &folded)?;
    let out_shape: Vec<usize> = [t, b]
        .into_iter()
        .chain(y.shape()[1..].iter().copied())
        .collect();
    tape.reshape(&y, &out_shape)
}

/// Conv1x1 -> BN -> SN on a `[T,B,C,H,W]` stream.
fn project_one(
    tape: &Tape,
    x: &Tensor,
    conv: &ConvParams,
    bn: &BatchNormParams,
    sn: &LIFParams,
) -> Result<SpikeTensor> {
    let pre = fold_time(tape, x, |tp, folded| {
        let y = tp.conv2d(folded, conv)?;
        tp.batchnorm(&y, bn)
    })?;
    lif_sequence(tape, &pre, sn)
}

/// Spike-form Q/K/V from a binary input stream.
pub fn qkv_project(
    tape: &Tape,
    x: &SpikeTensor,
    p: &QKVProjection,
) -> Result<(SpikeTensor, SpikeTensor, SpikeTensor)> {
    let xt = x.tensor();
    let q = project_one(tape, xt, &p.conv_q, &p.bn_q, &p.sn_q)?;
    let k = project_one(tape, xt, &p.conv_k, &p.bn_k, &p.sn_k)?;
    let v = project_one(tape, xt, &p.conv_v, &p.bn_v, &p.sn_v)?;
    Ok((q, k, v))
}

/// Channel slices `(Q^m, K^m, V^m)` for every group.
pub fn group_slices(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: usize,
) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
    (0..groups)
        .map(|m| {
            Ok((
                tape.slice_channels(q, m, groups)?,
                tape.slice_channels(k, m, groups)?,
                tape.slice_channels(v, m, groups)?,
            ))
        })
        .collect()
}

/// Gather a dilated window along one axis. For input `[T,B,C,H,W]`, output
/// `[T,B,C,H,W,w]` where slot `j` holds the neighbor at offset
/// `(j - floor(w/2)) * rate` (zero when out of bounds).
pub fn dilated_sample(
    tape: &Tape,
    x: &Tensor,
    axis: WindowAxis,
    rate: usize,
    window: usize,
) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(shape_err!("dilated_sample: need [T,B,C,H,W], got {:?}", x.shape()));
    }
    if window % 2 == 0 || window == 0 {
        return Err(config_err!("dilated_sample: window must be odd, got {window}"));
    }
    if rate == 0 {
        return Err(config_err!("dilated_sample: rate must be >= 1"));
    }
    let (h, w) = (x.shape()[3], x.shape()[4]);
    let planes: usize = x.shape()[..3].iter().product();
    let half = (window / 2) as isize;
    let r = rate as isize;

    let gather = |src: &[f32], dst: &mut [f32]| {
        // dst is one [H,W,window] block; src one [H,W] plane.
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * window;
                for (slot, off) in (-half..=half).enumerate() {
                    let (si, sj) = match axis {
                        WindowAxis::Horizontal => (i as isize, j as isize + off * r),
                        WindowAxis::Vertical => (i as isize + off * r, j as isize),
                    };
                    dst[base + slot] =
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            0.0
                        } else {
                            src[si as usize * w + sj as usize]
                        };
                }
            }
        }
    };

    let plane = h * w;
    let mut out = vec![0.0f32; planes * plane * window];
    for p in 0..planes {
        gather(
            &x.data()[p * plane..(p + 1) * plane],
            &mut out[p * plane * window..(p + 1) * plane * window],
        );
    }
    let mut out_shape = x.shape().to_vec();
    out_shape.push(window);
    let out = Tensor::new(&out_shape, out)?;

    let xn = x.node;
    let in_shape = x.shape().to_vec();
    Ok(tape.record("dilated_sample", &[xn], out, move |g, sink| {
        let mut gx = vec![0.0f32; planes * plane];
        for p in 0..planes {
            let gsrc = &g.data()[p * plane * window..(p + 1) * plane * window];
            let gdst = &mut gx[p * plane..(p + 1) * plane];
            for i in 0..h {
                for j in 0..w {
                    let base = (i * w + j) * window;
                    for (slot, off) in (-half..=half).enumerate() {
                        let (si, sj) = match axis {
                            WindowAxis::Horizontal => (i as isize, j as isize + off * r),
                            WindowAxis::Vertical => (i as isize + off * r, j as isize),
                        };
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            continue;
                        }
                        gdst[si as usize * w + sj as usize] += gsrc[base + slot];
                    }
                }
            }
        }
        sink.add(xn, Tensor::new(&in_shape, gx).expect("dilated_sample backward"));
    }))
}

/// Windowed linear attention along one axis:
/// `out(i,j) = (q(i,j) . K~(i,j)) V~(i,j)^T * scale`.
fn windowed_attention(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    axis: WindowAxis,
    rate: usize,
    window: usize,
    scale: f32,
) -> Result<Tensor> {
    let (t, b, d, h, w) = (
        q.shape()[0],
        q.shape()[1],
        q.shape()[2],
        q.shape()[3],
        q.shape()[4],
    );
    let hw = h * w;
    let tbhw = t * b * hw;

    let kg = dilated_sample(tape, k, axis, rate, window)?;
    let vg = dilated_sample(tape, v, axis, rate, window)?;

    // q: [T,B,d,H,W] -> [TBHW, 1, d]
    let q2 = tape.reshape(q, &[t * b, d, hw])?;
    let q2 = tape.permute(&q2, &[0, 2, 1])?;
    let q_rows = tape.reshape(&q2, &[tbhw, 1, d])?;

    // gathered: [T,B,d,H,W,w] -> [TBHW, d, w]
    let to_rows = |g: &Tensor| -> Result<Tensor> {
        let r = tape.reshape(g, &[t * b, d, hw, window])?;
        let r = tape.permute(&r, &[0, 2, 1, 3])?;
        tape.reshape(&r, &[tbhw, d, window])
    };
    let k_rows = to_rows(&kg)?;
    let v_rows = to_rows(&vg)?;

    // attn[1, w] = q . K~ ; out[1, d] = attn . V~^T
    let attn = tape.matmul_batched(&q_rows, &k_rows)?;
    let v_t = tape.permute(&v_rows, &[0, 2, 1])?;
    let out = tape.matmul_batched(&attn, &v_t)?;
    let out = tape.scale(&out, scale);

    // back to [T,B,d,H,W]
    let out = tape.reshape(&out, &[t * b, hw, d])?;
    let out = tape.permute(&out, &[0, 2, 1])?;
    tape.reshape(&out, &[t, b, d, h, w])
}

/// Spatial dilated attention for one group: horizontal plus vertical
/// windowed attention, each pre-scaled, plus the depthwise complement.
pub fn sda_group(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rate: usize,
    cfg: &LSSSAConfig,
    dwc: &SDAGroupParams,
) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err!(
            "sda: q/k/v shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let scale = cfg.scale()?;
    let horiz = windowed_attention(tape, q, k, v, WindowAxis::Horizontal, rate, cfg.window_h, scale)?;
    let vert = windowed_attention(tape, q, k, v, WindowAxis::Vertical, rate, cfg.window_v, scale)?;
    let directional = tape.add(&horiz, &vert)?;
    if !cfg.enable_dwc {
        return Ok(directional);
    }
    let complement = fold_time(tape, v, |tp, folded| {
        let y = tp.depthwise_conv2d(folded, &dwc.dwc)?;
        tp.batchnorm(&y, &dwc.bn)
    })?;
    tape.add(&directional, &complement)
}

/// Channel recalibration attention for one group: flatten spatial to
/// tokens, split heads, `Q (K^T V) * scale` per head, concat heads.
pub fn cra_group(tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor, cfg: &LSSSAConfig) -> Result<Tensor> {
    let (t, b, d, h, w) = (
        q.shape()[0],
        q.shape()[1],
        q.shape()[2],
        q.shape()[3],
        q.shape()[4],
    );
    if d % cfg.heads != 0 {
        return Err(config_err!(
            "cra: group width {d} not divisible by heads {}",
            cfg.heads
        ));
    }
    let n_tokens = h * w;
    let dh = d / cfg.heads;
    let scale = cfg.scale()?;

    // [T,B,d,H,W] -> [TB, N', d]
    let tokens = |x: &Tensor| -> Result<Tensor> {
        let r = tape.reshape(x, &[t * b, d, n_tokens])?;
        tape.permute(&r, &[0, 2, 1])
    };
    let qt = tokens(q)?;
    let kt = tokens(k)?;
    let vt = tokens(v)?;

    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = tape.slice_axis(&qt, 2, hd * dh, dh)?;
        let kh = tape.slice_axis(&kt, 2, hd * dh, dh)?;
        let vh = tape.slice_axis(&vt, 2, hd * dh, dh)?;
        // K^T V: [TB, dh, dh]: keeps cost linear in token count.
        let k_t = tape.permute(&kh, &[0, 2, 1])?;
        let kv = tape.matmul_batched(&k_t, &vh)?;
        let out = tape.matmul_batched(&qh, &kv)?;
        heads.push(tape.scale(&out, scale));
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat_axis(&refs, 2)?;

    // [TB, N', d] -> [T,B,d,H,W]
    let back = tape.permute(&cat, &[0, 2, 1])?;
    tape.reshape(&back, &[t, b, d, h, w])
}

/// Fuse per-group SDA and CRA results and project back to `D` channels:
/// `x' = BN(Conv1x1(SN(concat_m { alpha_m s_m , beta_m c_m })))`.
pub fn scdf_fuse(
    tape: &Tape,
    spatial: &[Option<Tensor>],
    channel: &[Option<Tensor>],
    p: &LsssaParams,
) -> Result<Tensor> {
    scdf_fuse_probed(tape, spatial, channel, p, None)
}

fn scdf_fuse_probed(
    tape: &Tape,
    spatial: &[Option<Tensor>],
    channel: &[Option<Tensor>],
    p: &LsssaParams,
    probe: Option<(&Probe, &str)>,
) -> Result<Tensor> {
    let groups = p.cfg.groups;
    if spatial.len() != groups || channel.len() != groups {
        return Err(config_err!(
            "scdf: got {}/{} branch outputs for {} groups",
            spatial.len(),
            channel.len(),
            groups
        ));
    }
    let mut fused = Vec::with_capacity(groups);
    for m in 0..groups {
        let template = spatial[m]
            .as_ref()
            .or(channel[m].as_ref())
            .ok_or_else(|| config_err!("scdf: group {m} has no branch output"))?;
        let zeros = || Tensor::zeros(template.shape());
        let (s_part, c_part) = if p.cfg.enable_scdf {
            let s = match &spatial[m] {
                Some(s) => tape.mul(&p.alpha[m].taped(tape), s)?,
                None => zeros(),
            };
            let c = match &channel[m] {
                Some(c) => tape.mul(&p.beta[m].taped(tape), c)?,
                None => zeros(),
            };
            (s, c)
        } else {
            // Coupled fusion: both branches share one fixed weight.
            (
                spatial[m].clone().unwrap_or_else(zeros),
                channel[m].clone().unwrap_or_else(zeros),
            )
        };
        fused.push(tape.concat_channels(&[&s_part, &c_part])?);
    }
    let refs: Vec<&Tensor> = fused.iter().collect();
    let att = tape.concat_channels(&refs)?;

    let spikes = lif_sequence(tape, &att, &p.sn_fuse)?;
    if let Some((probe, name)) = probe {
        let (h, w) = (att.shape()[3], att.shape()[4]);
        let flops = count_flops(&LayerDescriptor::Conv {
            c_in: 2 * p.cfg.embed_dim,
            c_out: p.cfg.embed_dim,
            groups: 1,
            kernel: (1, 1),
            out_hw: (h, w),
        });
        probe.record_spiking(format!("{name}.out_proj"), flops, spikes.tensor())?;
    }
    fold_time(tape, spikes.tensor(), |tp, folded| {
        let y = tp.conv2d(folded, &p.out_conv)?;
        tp.batchnorm(&y, &p.out_bn)
    })
}

/// Per-frame FLOPs of one group's attention arithmetic: the two windowed
/// passes (scores `q.K~`, apply `attn.V~^T`), the depthwise complement,
/// and the per-head channel attention in its linear association.
fn group_attention_flops(cfg: &LSSSAConfig, h: usize, w: usize) -> Result<u64> {
    let d = cfg.group_dim()?;
    let hw = h * w;
    let mut total = 0u64;
    if cfg.enable_sda {
        for win in [cfg.window_h, cfg.window_v] {
            total += count_flops(&LayerDescriptor::Matmul { batch: hw, m: 1, k: d, p: win });
            total += count_flops(&LayerDescriptor::Matmul { batch: hw, m: 1, k: win, p: d });
        }
        if cfg.enable_dwc {
            total += count_flops(&LayerDescriptor::Conv {
                c_in: d,
                c_out: d,
                groups: d,
                kernel: (cfg.dwc_kernel, cfg.dwc_kernel),
                out_hw: (h, w),
            });
        }
    }
    if cfg.enable_cra {
        let dh = d / cfg.heads;
        // K^T V then Q (K^T V), per head.
        total += cfg.heads as u64
            * (count_flops(&LayerDescriptor::Matmul { batch: 1, m: dh, k: hw, p: dh })
                + count_flops(&LayerDescriptor::Matmul { batch: 1, m: hw, k: dh, p: dh }));
    }
    Ok(total)
}

/// Per-frame FLOPs of one attention block at the given token grid
/// (synaptic arithmetic only: convs and attention matmuls).
pub fn lsssa_flops(cfg: &LSSSAConfig, h: usize, w: usize) -> Result<u64> {
    let d_model = cfg.embed_dim;
    let mut total = 0u64;
    // Q/K/V projections.
    total += 3 * count_flops(&LayerDescriptor::Conv {
        c_in: d_model,
        c_out: d_model,
        groups: 1,
        kernel: (1, 1),
        out_hw: (h, w),
    });
    total += cfg.groups as u64 * group_attention_flops(cfg, h, w)?;
    // Output projection 2D -> D.
    total += count_flops(&LayerDescriptor::Conv {
        c_in: 2 * d_model,
        c_out: d_model,
        groups: 1,
        kernel: (1, 1),
        out_hw: (h, w),
    });
    Ok(total)
}

/// Full attention block forward. `probe` records firing rates and FLOPs
/// per projection when profiling.
pub fn lsssa_forward(
    tape: &Tape,
    x: &SpikeTensor,
    p: &LsssaParams,
    probe: Option<(&Probe, &str)>,
) -> Result<Tensor> {
    let cfg = &p.cfg;
    let d_model = cfg.embed_dim;
    let xt = x.tensor();
    if xt.rank() != 5 || xt.shape()[2] != d_model {
        return Err(shape_err!(
            "lsssa: expected [T,B,{d_model},H,W], got {:?}",
            xt.shape()
        ));
    }
    let (h, w) = (xt.shape()[3], xt.shape()[4]);

    if let Some((probe, name)) = probe {
        let proj = count_flops(&LayerDescriptor::Conv {
            c_in: d_model,
            c_out: d_model,
            groups: 1,
            kernel: (1, 1),
            out_hw: (h, w),
        });
        probe.record_spiking(format!("{name}.qkv"), 3 * proj, xt)?;
    }
    let (q, k, v) = qkv_project(tape, x, &p.qkv)?;

    let slices = group_slices(tape, q.tensor(), k.tensor(), v.tensor(), cfg.groups)?;
    let mut spatial = Vec::with_capacity(cfg.groups);
    let mut channel = Vec::with_capacity(cfg.groups);
    for (m, (qm, km, vm)) in slices.iter().enumerate() {
        if let Some((probe, name)) = probe {
            // Firing rate over the group's q/k/v slices feeding the matmuls.
            let fr = (crate::metrics::firing_rate(qm)?
                + crate::metrics::firing_rate(km)?
                + crate::metrics::firing_rate(vm)?)
                / 3.0;
            probe.record_spiking_rate(
                format!("{name}.g{m}.attn"),
                group_attention_flops(cfg, h, w)?,
                fr,
            );
        }
        spatial.push(if cfg.enable_sda {
            Some(sda_group(tape, qm, km, vm, cfg.dilation_rates[m], cfg, &p.sda_groups[m])?)
        } else {
            None
        });
        channel.push(if cfg.enable_cra {
            Some(cra_group(tape, qm, km, vm, cfg)?)
        } else {
            None
        });
    }

    scdf_fuse_probed(tape, &spatial, &channel, p, probe)
}

/// Per-frame FLOPs of the attention arithmetic alone (SDA and CRA matmuls
/// plus the depthwise complement), excluding the `D^2` projection convs.
/// With the default head rule (head width pinned at 16) this quantity is
/// linear in the embedding dimension.
pub fn lsssa_attention_core_flops(cfg: &LSSSAConfig, h: usize, w: usize) -> Result<u64> {
    Ok(cfg.groups as u64 * group_attention_flops(cfg, h, w)?)
}

/// Dense global self-attention over all tokens, the quadratic-cost
/// reference the local block is measured against. Used by benchmarks and
/// oracle tests only.
pub fn global_ssa_reference(tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor, scale: f32) -> Result<Tensor> {
    let (t, b, d, h, w) = (
        q.shape()[0],
        q.shape()[1],
        q.shape()[2],
        q.shape()[3],
        q.shape()[4],
    );
    let n = h * w;
    let tokens = |x: &Tensor| -> Result<Tensor> {
        let r = tape.reshape(x, &[t * b, d, n])?;
        tape.permute(&r, &[0, 2, 1])
    };
    let qt = tokens(q)?;
    let kt = tokens(k)?;
    let vt = tokens(v)?;
    let k_t = tape.permute(&kt, &[0, 2, 1])?;
    let scores = tape.matmul_batched(&qt, &k_t)?; // [TB, N, N]
    let out = tape.matmul_batched(&scores, &vt)?;
    let out = tape.scale(&out, scale);
    let back = tape.permute(&out, &[0, 2, 1])?;
    tape.reshape(&back, &[t, b, d, h, w])
}

/// Per-frame FLOPs of the reference global attention core (two dense
/// matmuls over all token pairs).
pub fn global_ssa_flops(d_model: usize, h: usize, w: usize) -> u64 {
    let n = h * w;
    2 * count_flops(&LayerDescriptor::Matmul { batch: 1, m: n, k: d_model, p: n })
}
