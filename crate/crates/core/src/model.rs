//! Model assembly: spiking tokenizer, encoder stack, classifier head.
//!
//! Signal flow, all tensors `[T,B,...]`:
//!
//! ```text
//! frames -> tokenizer (4 x Conv3x3 + BN [+ SPool] + SN) -> U0 (binary)
//! U_l  = LSSSA(SN(U_{l-1})) + U_{l-1}
//! S_l  = MLP(SN(U_l)) + U_l          MLP: Conv1x1 BN SN Conv1x1 BN
//! Y    = head(mean_T(GAP(S_L)))
//! ```
//!
//! Residual streams carry real-valued (membrane-like) quantities; each
//! sub-block leads with a spiking neuron so convolutions consume spikes.
//! Spiking response pooling sits between BN and SN inside its tokenizer
//! stage: it pools the pre-spike activations and the stage's neuron
//! re-binarizes, which keeps the tokenizer output binary.

use std::fmt::Write as _;

use crate::attention::{fold_time, lsssa_forward, LSSSAConfig, LsssaParams};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, LayerDescriptor, Probe};
use crate::neuron::{lif_sequence, LIFParams, SpikeMode};
use crate::param::{HasParams, Param};
use crate::pooling::{pool_output_shape, SPoolingConfig};
use crate::rng::XorShift64;
use crate::tensor::conv::ConvParams;
use crate::tensor::norm::BatchNormParams;
use crate::tensor::{SpikeTensor, Tape, Tensor};
use crate::{config_err, shape_err};

/// Where the timestep mean is taken in the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Average pooled features over T, then one linear head (default).
    MeanFeatures,
    /// Apply the head per timestep and average the logits.
    MeanLogits,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    /// How many of the last tokenizer stages carry a pooling step.
    pub num_pool_stages: usize,
    pub mlp_ratio: f32,
    pub spool_kernel: usize,
    pub spool_stride: usize,
    pub spool_padding: usize,
    pub spool_lambda: f32,
    pub attn_groups: usize,
    pub attn_dilation_rates: Vec<usize>,
    pub attn_window_h: usize,
    pub attn_window_v: usize,
    pub attn_heads: usize,
    pub attn_dwc_kernel: usize,
    pub attn_enable_sda: bool,
    pub attn_enable_cra: bool,
    pub attn_enable_scdf: bool,
    pub attn_enable_dwc: bool,
    pub lif_tau: f32,
    pub lif_u_th: f32,
    pub lif_u_reset: f32,
    pub lif_surrogate_width: f32,
    pub lif_detach_reset: bool,
    pub head_mode: HeadMode,
}

pub const TOKENIZER_STAGES: usize = 4;

impl ModelConfig {
    /// Small configuration for desk-scale experiments: 2 blocks, 64
    /// channels, 2 timesteps on 16x16 single-channel frames.
    pub fn toy() -> Self {
        Self {
            in_channels: 1,
            image_h: 16,
            image_w: 16,
            embed_dim: 64,
            num_blocks: 2,
            num_classes: 4,
            timesteps: 2,
            num_pool_stages: 2,
            mlp_ratio: 4.0,
            spool_kernel: 3,
            spool_stride: 2,
            spool_padding: 1,
            spool_lambda: 0.3,
            attn_groups: 2,
            attn_dilation_rates: vec![1, 2],
            attn_window_h: 3,
            attn_window_v: 3,
            attn_heads: 2,
            attn_dwc_kernel: 3,
            attn_enable_sda: true,
            attn_enable_cra: true,
            attn_enable_scdf: true,
            attn_enable_dwc: true,
            lif_tau: 2.0,
            lif_u_th: 1.0,
            lif_u_reset: 0.0,
            lif_surrogate_width: 2.0,
            lif_detach_reset: true,
            head_mode: HeadMode::MeanFeatures,
        }
    }

    /// Static-image preset: four blocks, 384 channels, 32x32 RGB input.
    pub fn lsformer_4_384() -> Self {
        Self {
            in_channels: 3,
            image_h: 32,
            image_w: 32,
            embed_dim: 384,
            num_blocks: 4,
            num_classes: 10,
            timesteps: 4,
            attn_groups: 3,
            attn_dilation_rates: vec![1, 2, 3],
            attn_heads: 8,
            ..Self::toy()
        }
    }

    /// Neuromorphic preset: two blocks, 256 channels, 128x128 two-polarity
    /// event frames pooled down to 8x8.
    pub fn lsformer_2_256() -> Self {
        Self {
            in_channels: 2,
            image_h: 128,
            image_w: 128,
            embed_dim: 256,
            num_blocks: 2,
            num_classes: 10,
            timesteps: 10,
            num_pool_stages: 4,
            attn_groups: 2,
            attn_dilation_rates: vec![1, 2],
            attn_heads: 8,
            ..Self::toy()
        }
    }

    /// One-block micro model for gradient checking: 16 channels on a 4x4
    /// token grid.
    pub fn micro() -> Self {
        Self {
            embed_dim: 16,
            num_blocks: 1,
            attn_heads: 1,
            ..Self::toy()
        }
    }

    pub fn lif(&self) -> Result<LIFParams> {
        let mut p = LIFParams::new(
            self.lif_tau,
            self.lif_u_th,
            self.lif_u_reset,
            self.lif_surrogate_width,
        )?;
        p.detach_reset = self.lif_detach_reset;
        Ok(p)
    }

    pub fn attn_config(&self) -> Result<LSSSAConfig> {
        let cfg = LSSSAConfig {
            embed_dim: self.embed_dim,
            groups: self.attn_groups,
            dilation_rates: self.attn_dilation_rates.clone(),
            window_h: self.attn_window_h,
            window_v: self.attn_window_v,
            heads: self.attn_heads,
            dwc_kernel: self.attn_dwc_kernel,
            enable_sda: self.attn_enable_sda,
            enable_cra: self.attn_enable_cra,
            enable_scdf: self.attn_enable_scdf,
            enable_dwc: self.attn_enable_dwc,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % 8 != 0 {
            return Err(config_err!(
                "model: embed dim {} must divide by 8 for the tokenizer channel ladder",
                self.embed_dim
            ));
        }
        if self.num_pool_stages > TOKENIZER_STAGES {
            return Err(config_err!(
                "model: at most {TOKENIZER_STAGES} pool stages, got {}",
                self.num_pool_stages
            ));
        }
        let down = 1usize << self.num_pool_stages;
        if self.image_h % down != 0 || self.image_w % down != 0 {
            return Err(config_err!(
                "model: image {}x{} not divisible by 2^{} pooling",
                self.image_h,
                self.image_w,
                self.num_pool_stages
            ));
        }
        if self.num_blocks == 0 || self.num_classes == 0 || self.timesteps == 0 {
            return Err(config_err!("model: blocks, classes and timesteps must be >= 1"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(config_err!("model: mlp ratio must be positive"));
        }
        self.attn_config()?;
        self.lif()?;
        Ok(())
    }

    /// Token-grid extents after the tokenizer.
    pub fn token_hw(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.image_h, self.image_w);
        for _ in 0..self.num_pool_stages {
            let (nh, nw) =
                pool_output_shape(h, w, self.spool_kernel, self.spool_stride, self.spool_padding)?;
            h = nh;
            w = nw;
        }
        Ok((h, w))
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.mlp_ratio as f64) * self.embed_dim as f64).round() as usize
    }

    /// Canonical `key=value` text: sorted keys, one per line.
    pub fn to_config_text(&self) -> String {
        let rates: Vec<String> = self.attn_dilation_rates.iter().map(|r| r.to_string()).collect();
        let mut pairs: Vec<(&str, String)> = vec![
            ("attn_dilation_rates", rates.join(",")),
            ("attn_dwc_kernel", self.attn_dwc_kernel.to_string()),
            ("attn_enable_cra", self.attn_enable_cra.to_string()),
            ("attn_enable_dwc", self.attn_enable_dwc.to_string()),
            ("attn_enable_scdf", self.attn_enable_scdf.to_string()),
            ("attn_enable_sda", self.attn_enable_sda.to_string()),
            ("attn_groups", self.attn_groups.to_string()),
            ("attn_heads", self.attn_heads.to_string()),
            ("attn_window_h", self.attn_window_h.to_string()),
            ("attn_window_v", self.attn_window_v.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            (
                "head_mode",
                match self.head_mode {
                    HeadMode::MeanFeatures => "features".to_string(),
                    HeadMode::MeanLogits => "logits".to_string(),
                },
            ),
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("lif_detach_reset", self.lif_detach_reset.to_string()),
            ("lif_surrogate_width", format_f32(self.lif_surrogate_width)),
            ("lif_tau", format_f32(self.lif_tau)),
            ("lif_u_reset", format_f32(self.lif_u_reset)),
            ("lif_u_th", format_f32(self.lif_u_th)),
            ("mlp_ratio", format_f32(self.mlp_ratio)),
            ("num_blocks", self.num_blocks.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("num_pool_stages", self.num_pool_stages.to_string()),
            ("spool_kernel", self.spool_kernel.to_string()),
            ("spool_lambda", format_f32(self.spool_lambda)),
            ("spool_padding", self.spool_padding.to_string()),
            ("spool_stride", self.spool_stride.to_string()),
            ("timesteps", self.timesteps.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Parse canonical config text. Unknown keys are rejected.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: missing '='", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Format(format!("config: duplicate key {key}")));
            }
            cfg.apply_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` setting (shared by config files and CLI
    /// overrides). Unknown keys are an error.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("config: bad value for {key}: {v}")))
        }
        match key {
            "attn_dilation_rates" => {
                let rates: Result<Vec<usize>> =
                    value.split(',').map(|r| parse(key, r.trim())).collect();
                self.attn_dilation_rates = rates?;
            }
            "attn_dwc_kernel" => self.attn_dwc_kernel = parse(key, value)?,
            "attn_enable_cra" => self.attn_enable_cra = parse(key, value)?,
            "attn_enable_dwc" => self.attn_enable_dwc = parse(key, value)?,
            "attn_enable_scdf" => self.attn_enable_scdf = parse(key, value)?,
            "attn_enable_sda" => self.attn_enable_sda = parse(key, value)?,
            "attn_groups" => self.attn_groups = parse(key, value)?,
            "attn_heads" => self.attn_heads = parse(key, value)?,
            "attn_window_h" => self.attn_window_h = parse(key, value)?,
            "attn_window_v" => self.attn_window_v = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "head_mode" => {
                self.head_mode = match value {
                    "features" => HeadMode::MeanFeatures,
                    "logits" => HeadMode::MeanLogits,
                    _ => return Err(Error::Format(format!("config: bad head_mode {value}"))),
                }
            }
            "image_h" => self.image_h = parse(key, value)?,
            "image_w" => self.image_w = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "lif_detach_reset" => self.lif_detach_reset = parse(key, value)?,
            "lif_surrogate_width" => self.lif_surrogate_width = parse(key, value)?,
            "lif_tau" => self.lif_tau = parse(key, value)?,
            "lif_u_reset" => self.lif_u_reset = parse(key, value)?,
            "lif_u_th" => self.lif_u_th = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "num_blocks" => self.num_blocks = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "num_pool_stages" => self.num_pool_stages = parse(key, value)?,
            "spool_kernel" => self.spool_kernel = parse(key, value)?,
            "spool_lambda" => self.spool_lambda = parse(key, value)?,
            "spool_padding" => self.spool_padding = parse(key, value)?,
            "spool_stride" => self.spool_stride = parse(key, value)?,
            "timesteps" => self.timesteps = parse(key, value)?,
            _ => return Err(Error::Format(format!("config: unknown key {key}"))),
        }
        Ok(())
    }
}

fn format_f32(v: f32) -> String {
    // Shortest round-trip representation; stable across platforms.
    format!("{v:?}")
}

struct TokenizerStage {
    conv: ConvParams,
    bn: BatchNormParams,
    pool: Option<SPoolingConfig>,
    sn: LIFParams,
}

pub struct Tokenizer {
    stages: Vec<TokenizerStage>,
}

impl Tokenizer {
    fn new(cfg: &ModelConfig, lif: &LIFParams, rng: &mut XorShift64) -> Result<Self> {
        let d = cfg.embed_dim;
        let channels = [d / 8, d / 4, d / 2, d];
        let mut stages = Vec::with_capacity(TOKENIZER_STAGES);
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in channels.iter().enumerate() {
            let name = format!("tokenizer.stage{}", i + 1);
            let pool = if i >= TOKENIZER_STAGES - cfg.num_pool_stages {
                Some(SPoolingConfig::new(
                    &format!("{name}.spool"),
                    cfg.spool_kernel,
                    cfg.spool_stride,
                    cfg.spool_padding,
                    cfg.spool_lambda,
                )?)
            } else {
                None
            };
            stages.push(TokenizerStage {
                conv: ConvParams::new(&format!("{name}.conv"), c_in, c_out, 3, 1, 1, 1, rng)?,
                bn: BatchNormParams::new(&format!("{name}.bn"), c_out),
                pool,
                sn: lif.clone(),
            });
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    /// Project `[T,B,C,H,W]` frames into a binary token grid.
    pub fn forward(
        &self,
        tape: &Tape,
        input: &Tensor,
        probe: Option<&Probe>,
    ) -> Result<SpikeTensor> {
        if input.rank() != 5 {
            return Err(shape_err!(
                "tokenizer: expected [T,B,C,H,W], got {:?}",
                input.shape()
            ));
        }
        let mut cur = input.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let (h, w) = (cur.shape()[3], cur.shape()[4]);
            let (kh, kw) = stage.conv.kernel();
            if let Some(probe) = probe {
                let flops = count_flops(&LayerDescriptor::Conv {
                    c_in: stage.conv.c_in(),
                    c_out: stage.conv.c_out(),
                    groups: 1,
                    kernel: (kh, kw),
                    out_hw: (h, w),
                });
                let name = format!("tokenizer.stage{}.conv", i + 1);
                if i == 0 {
                    // First conv consumes dense frames: ANN-rate entry.
                    probe.record_dense(name, flops);
                } else {
                    probe.record_spiking(name, flops, &cur)?;
                }
            }
            cur = fold_time(tape, &cur, |tp, folded| {
                let y = tp.conv2d(folded, &stage.conv)?;
                tp.batchnorm(&y, &stage.bn)
            })?;
            if let Some(probe) = probe {
                probe.record_overhead(
                    format!("tokenizer.stage{}.bn", i + 1),
                    count_flops(&LayerDescriptor::BatchNorm {
                        elems: stage.conv.c_out() * h * w,
                    }),
                );
            }
            if let Some(pool) = &stage.pool {
                if let Some(probe) = probe {
                    let (ho, wo) = pool_output_shape(h, w, pool.kernel, pool.stride, pool.padding)?;
                    probe.record_overhead(
                        format!("tokenizer.stage{}.spool", i + 1),
                        // Max and average passes over each window.
                        2 * count_flops(&LayerDescriptor::Pool {
                            kernel: pool.kernel,
                            out_elems: stage.conv.c_out() * ho * wo,
                        }),
                    );
                }
                cur = fold_time(tape, &cur, |tp, folded| tp.spool(folded, pool))?;
            }
            cur = lif_sequence(tape, &cur, &stage.sn)?.into_tensor();
        }
        Ok(SpikeTensor::from_relaxed(cur))
    }

    fn set_training(&self, training: bool) {
        for s in &self.stages {
            s.bn.training.set(training);
        }
    }

    fn set_mode(&self, mode: SpikeMode) {
        for s in &self.stages {
            s.sn.mode.set(mode);
            if let Some(pool) = &s.pool {
                pool.relaxed.set(mode == SpikeMode::Relaxed);
            }
        }
    }
}

impl HasParams for Tokenizer {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for s in &self.stages {
            out.push(&s.conv.weight);
            if let Some(b) = &s.conv.bias {
                out.push(b);
            }
            out.push(&s.bn.gamma);
            out.push(&s.bn.beta);
            if let Some(pool) = &s.pool {
                out.push(&pool.theta);
            }
        }
    }
}

/// Two Conv1x1+BN stages, each led by a spiking neuron.
pub struct MlpParams {
    pub sn_pre: LIFParams,
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub sn_mid: LIFParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
}

pub struct EncoderBlockParams {
    pub sn_pre_attn: LIFParams,
    pub attn: LsssaParams,
    pub mlp: MlpParams,
}

impl EncoderBlockParams {
    fn new(name: &str, cfg: &ModelConfig, lif: &LIFParams, rng: &mut XorShift64) -> Result<Self> {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        Ok(Self {
            sn_pre_attn: lif.clone(),
            attn: LsssaParams::new(&format!("{name}.attn"), cfg.attn_config()?, lif, rng)?,
            mlp: MlpParams {
                sn_pre: lif.clone(),
                conv1: ConvParams::new(&format!("{name}.mlp.conv1"), d, hidden, 1, 1, 0, 1, rng)?,
                bn1: BatchNormParams::new(&format!("{name}.mlp.bn1"), hidden),
                sn_mid: lif.clone(),
                conv2: ConvParams::new(&format!("{name}.mlp.conv2"), hidden, d, 1, 1, 0, 1, rng)?,
                bn2: BatchNormParams::new(&format!("{name}.mlp.bn2"), d),
            },
        })
    }

    /// `S = MLP(SN(U)) + U` after `U = LSSSA(SN(U_prev)) + U_prev`.
    pub fn forward(
        &self,
        tape: &Tape,
        u_prev: &Tensor,
        probe: Option<(&Probe, &str)>,
    ) -> Result<Tensor> {
        let (h, w) = (u_prev.shape()[3], u_prev.shape()[4]);
        let attn_in = lif_sequence(tape, u_prev, &self.sn_pre_attn)?;
        let attn_out = lsssa_forward(tape, &attn_in, &self.attn, probe)?;
        let u = tape.add(&attn_out, u_prev)?;

        let mlp_in = lif_sequence(tape, &u, &self.mlp.sn_pre)?;
        if let Some((probe, name)) = probe {
            let flops = count_flops(&LayerDescriptor::Conv {
                c_in: self.mlp.conv1.c_in(),
                c_out: self.mlp.conv1.c_out(),
                groups: 1,
                kernel: (1, 1),
                out_hw: (h, w),
            });
            probe.record_spiking(format!("{name}.mlp.conv1"), flops, mlp_in.tensor())?;
        }
        let hidden = fold_time(tape, mlp_in.tensor(), |tp, folded| {
            let y = tp.conv2d(folded, &self.mlp.conv1)?;
            tp.batchnorm(&y, &self.mlp.bn1)
        })?;
        let hidden_spikes = lif_sequence(tape, &hidden, &self.mlp.sn_mid)?;
        if let Some((probe, name)) = probe {
            let flops = count_flops(&LayerDescriptor::Conv {
                c_in: self.mlp.conv2.c_in(),
                c_out: self.mlp.conv2.c_out(),
                groups: 1,
                kernel: (1, 1),
                out_hw: (h, w),
            });
            probe.record_spiking(format!("{name}.mlp.conv2"), flops, hidden_spikes.tensor())?;
        }
        let mlp_out = fold_time(tape, hidden_spikes.tensor(), |tp, folded| {
            let y = tp.conv2d(folded, &self.mlp.conv2)?;
            tp.batchnorm(&y, &self.mlp.bn2)
        })?;
        tape.add(&mlp_out, &u)
    }

    fn set_training(&self, training: bool) {
        self.attn.set_training(training);
        self.mlp.bn1.training.set(training);
        self.mlp.bn2.training.set(training);
    }

    fn set_mode(&self, mode: SpikeMode) {
        self.sn_pre_attn.mode.set(mode);
        self.attn.set_mode(mode);
        self.mlp.sn_pre.mode.set(mode);
        self.mlp.sn_mid.mode.set(mode);
    }
}

impl HasParams for EncoderBlockParams {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.attn.collect_params(out);
        for conv in [&self.mlp.conv1, &self.mlp.conv2] {
            out.push(&conv.weight);
            if let Some(b) = &conv.bias {
                out.push(b);
            }
        }
        for bn in [&self.mlp.bn1, &self.mlp.bn2] {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
    }
}

/// The full model.
pub struct LSFormer {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub blocks: Vec<EncoderBlockParams>,
    pub head_weight: Param,
    pub head_bias: Param,
}

impl LSFormer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = XorShift64::new(seed ^ 0x6C73666F726D6572); // "lsformer"
        let lif = cfg.lif()?;
        let tokenizer = Tokenizer::new(&cfg, &lif, &mut rng)?;
        let blocks = (0..cfg.num_blocks)
            .map(|l| EncoderBlockParams::new(&format!("block{l}"), &cfg, &lif, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.embed_dim;
        let bound = (1.0 / d as f32).sqrt();
        let w_data: Vec<f32> = (0..d * cfg.num_classes)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Ok(Self {
            tokenizer,
            blocks,
            head_weight: Param::new(
                "head.weight",
                Tensor::new(&[d, cfg.num_classes], w_data)?,
            ),
            head_bias: Param::new("head.bias", Tensor::zeros(&[cfg.num_classes])),
            cfg,
        })
    }

    /// Toggle batch-norm statistics mode everywhere.
    pub fn set_training(&self, training: bool) {
        self.tokenizer.set_training(training);
        for b in &self.blocks {
            b.set_training(training);
        }
    }

    /// Switch every spiking neuron between binary and relaxed dynamics.
    pub fn set_mode(&self, mode: SpikeMode) {
        self.tokenizer.set_mode(mode);
        for b in &self.blocks {
            b.set_mode(mode);
        }
    }

    pub fn mode(&self) -> SpikeMode {
        self.blocks[0].sn_pre_attn.mode.get()
    }

    /// Full forward pass: frames `[T,B,C,H,W]` to logits `[B, classes]`.
    pub fn forward(&self, tape: &Tape, input: &Tensor, probe: Option<&Probe>) -> Result<Tensor> {
        let features = self.features(tape, input, probe)?;
        self.classify(tape, &features, probe)
    }

    /// Tokenizer plus encoder stack; returns the last residual stream.
    pub fn features(&self, tape: &Tape, input: &Tensor, probe: Option<&Probe>) -> Result<Tensor> {
        if input.rank() != 5 {
            return Err(shape_err!("model: expected [T,B,C,H,W], got {:?}", input.shape()));
        }
        if input.shape()[0] != self.cfg.timesteps
            || input.shape()[2] != self.cfg.in_channels
            || input.shape()[3] != self.cfg.image_h
            || input.shape()[4] != self.cfg.image_w
        {
            return Err(shape_err!(
                "model: input {:?} does not match config [T={},B,*,C={},H={},W={}]",
                input.shape(),
                self.cfg.timesteps,
                self.cfg.in_channels,
                self.cfg.image_h,
                self.cfg.image_w
            ));
        }
        let u0 = self.tokenizer.forward(tape, input, probe)?;
        let mut stream = u0.into_tensor();
        for (l, block) in self.blocks.iter().enumerate() {
            let name = format!("block{l}");
            stream = block.forward(tape, &stream, probe.map(|p| (p, name.as_str())))?;
        }
        Ok(stream)
    }

    /// Global average pool, timestep mean, linear head.
    pub fn classify(&self, tape: &Tape, features: &Tensor, probe: Option<&Probe>) -> Result<Tensor> {
        let (t, b) = (features.shape()[0], features.shape()[1]);
        let d = self.cfg.embed_dim;
        let classes = self.cfg.num_classes;
        let pooled = tape.gap_spatial(features)?; // [T,B,D]
        if let Some(probe) = probe {
            probe.record_dense(
                "head.linear",
                count_flops(&LayerDescriptor::Matmul { batch: 1, m: 1, k: d, p: classes }),
            );
        }
        let w = self.head_weight.taped(tape);
        let bias = self.head_bias.taped(tape);
        match self.cfg.head_mode {
            HeadMode::MeanFeatures => {
                let mean = tape.mean_axis0(&pooled)?; // [B,D]
                let logits = tape.matmul_batched(&mean, &w)?;
                tape.add_bias(&logits, &bias)
            }
            HeadMode::MeanLogits => {
                let flat = tape.reshape(&pooled, &[t * b, d])?;
                let logits = tape.matmul_batched(&flat, &w)?;
                let logits = tape.add_bias(&logits, &bias)?;
                let per_t = tape.reshape(&logits, &[t, b, classes])?;
                tape.mean_axis0(&per_t)
            }
        }
    }

    /// Total learnable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.param_count()
    }

    /// Every batch-norm layer, for state persistence.
    fn bn_layers(&self) -> Vec<&BatchNormParams> {
        let mut out = Vec::new();
        for s in &self.tokenizer.stages {
            out.push(&s.bn);
        }
        for b in &self.blocks {
            out.push(&b.attn.qkv.bn_q);
            out.push(&b.attn.qkv.bn_k);
            out.push(&b.attn.qkv.bn_v);
            for g in &b.attn.sda_groups {
                out.push(&g.bn);
            }
            out.push(&b.attn.out_bn);
            out.push(&b.mlp.bn1);
            out.push(&b.mlp.bn2);
        }
        out
    }

    /// Non-learnable state (batch-norm running statistics) as named
    /// tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for bn in self.bn_layers() {
            let base = bn.gamma.name().trim_end_matches(".gamma").to_string();
            let c = bn.channels();
            out.push((
                format!("{base}.running_mean"),
                Tensor::new(&[c], bn.running_mean.borrow().clone()).expect("bn state shape"),
            ));
            out.push((
                format!("{base}.running_var"),
                Tensor::new(&[c], bn.running_var.borrow().clone()).expect("bn state shape"),
            ));
        }
        out
    }

    /// Restore state saved by [`LSFormer::state_tensors`].
    pub fn load_state_tensors(&self, get: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for bn in self.bn_layers() {
            let base = bn.gamma.name().trim_end_matches(".gamma").to_string();
            for (suffix, slot) in [
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                let name = format!("{base}.{suffix}");
                let t = get(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing state {name}")))?;
                if t.len() != bn.channels() {
                    return Err(Error::Format(format!(
                        "state {name} has {} values, expected {}",
                        t.len(),
                        bn.channels()
                    )));
                }
                *slot.borrow_mut() = t.data().to_vec();
            }
        }
        Ok(())
    }

    /// Parameter-count breakdown by top-level component.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        out.push(("tokenizer".to_string(), self.tokenizer.param_count()));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}"), b.param_count()));
        }
        out.push((
            "head".to_string(),
            self.head_weight.len() + self.head_bias.len(),
        ));
        out
    }
}

impl HasParams for LSFormer {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.tokenizer.collect_params(out);
        for b in &self.blocks {
            b.collect_params(out);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
    }
}

/// Instrumented spiking-mode forward: runs one batch through the model and
/// returns the per-block energy report. Refuses relaxed mode, where firing
/// rates are undefined.
pub fn profile_model(model: &LSFormer, input: &Tensor) -> Result<crate::metrics::EnergyReport> {
    if model.mode() != SpikeMode::Spiking {
        return Err(Error::Contract(
            "profile: firing rates are undefined in relaxed mode".into(),
        ));
    }
    let probe = Probe::new(model.cfg.timesteps as u32);
    let tape = Tape::no_grad();
    model.forward(&tape, input, Some(&probe))?;
    Ok(probe.into_report())
}
