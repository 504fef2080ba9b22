//! FLOP counting, firing rates, synaptic operations and energy estimates.
//!
//! The accounting follows the spike-driven convention: a block fed by
//! spikes performs `SOPs = fr * T * FLOPs` synaptic operations, where `fr`
//! is the firing rate of its input spike train, `T` the number of
//! timesteps, and `FLOPs` the per-frame floating-point cost of the
//! equivalent dense layer (multiply-accumulate = 2 FLOPs). Energy is
//! 77 fJ per synaptic operation; the dense (ANN) comparison path charges
//! 12.5 pJ per FLOP.
//!
//! Batch norm and pooling have no synapses: their FLOPs are tracked but
//! excluded from SOPs, and included in the dense-comparison total.

use std::cell::RefCell;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Energy per synaptic operation (45 nm CMOS accumulate), joules.
pub const ENERGY_PER_SOP: f64 = 77e-15;
/// Energy per dense FLOP (45 nm CMOS multiply-accumulate), joules.
pub const ENERGY_PER_FLOP: f64 = 12.5e-12;

/// Descriptor of a layer's per-frame arithmetic (batch 1, one timestep).
#[derive(Debug, Clone)]
pub enum LayerDescriptor {
    Conv {
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: (usize, usize),
        out_hw: (usize, usize),
    },
    Matmul {
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    BatchNorm {
        elems: usize,
    },
    Pool {
        kernel: usize,
        out_elems: usize,
    },
    Elementwise {
        elems: usize,
    },
}

/// FLOPs of one layer application, counting a multiply-accumulate as 2.
pub fn count_flops(d: &LayerDescriptor) -> u64 {
    match *d {
        LayerDescriptor::Conv {
            c_in,
            c_out,
            groups,
            kernel: (kh, kw),
            out_hw: (ho, wo),
        } => 2 * (c_out as u64) * ((c_in / groups) as u64) * (kh * kw) as u64 * (ho * wo) as u64,
        LayerDescriptor::Matmul { batch, m, k, p } => {
            2 * (batch as u64) * (m as u64) * (k as u64) * (p as u64)
        }
        // Normalize + affine: two ops per element.
        LayerDescriptor::BatchNorm { elems } => 2 * elems as u64,
        // One op per window element per output.
        LayerDescriptor::Pool { kernel, out_elems } => (kernel * kernel * out_elems) as u64,
        LayerDescriptor::Elementwise { elems } => elems as u64,
    }
}

/// Fraction of ones in a binary tensor. Errors on non-binary content.
pub fn firing_rate(x: &Tensor) -> Result<f64> {
    if !x.is_binary() {
        return Err(Error::Contract(
            "firing_rate: input contains values outside {0,1}".into(),
        ));
    }
    let ones: f64 = x.data().iter().map(|&v| v as f64).sum();
    Ok(ones / x.len() as f64)
}

/// Synaptic operations of a block: `fr * T * FLOPs`.
pub fn sops(fr: f64, timesteps: u32, flops: u64) -> f64 {
    fr * timesteps as f64 * flops as f64
}

/// Spiking energy in joules for a synaptic-operation count.
pub fn energy_snn(sops: f64) -> f64 {
    ENERGY_PER_SOP * sops
}

/// Dense (ANN) energy in joules for a FLOP count.
pub fn energy_ann(flops: f64) -> f64 {
    ENERGY_PER_FLOP * flops
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Fed by spikes; costed at `fr * T * FLOPs` synaptic operations.
    SpikeDriven,
    /// Fed by dense values (first conv on raw frames, classifier head);
    /// costed at ANN rates, once per timestep.
    DenseInput,
    /// No synapses (batch norm, pooling, residual adds); FLOPs tracked,
    /// zero spiking energy, included in the dense-comparison total.
    Overhead,
}

#[derive(Debug, Clone)]
pub struct BlockEnergy {
    pub name: String,
    pub kind: BlockKind,
    /// Per-frame FLOPs (batch 1, single timestep).
    pub flops: u64,
    /// Firing rate of the input spike train (1.0 for dense inputs).
    pub fr: f64,
    pub timesteps: u32,
    pub sops: f64,
    pub energy_j: f64,
}

/// Collects per-block measurements during an instrumented forward pass.
pub struct Probe {
    timesteps: u32,
    entries: RefCell<Vec<BlockEnergy>>,
}

impl Probe {
    pub fn new(timesteps: u32) -> Self {
        Self {
            timesteps,
            entries: RefCell::new(Vec::new()),
        }
    }

    pub fn timesteps(&self) -> u32 {
        self.timesteps
    }

    /// Record a spike-driven block: firing rate measured on its input.
    pub fn record_spiking(&self, name: impl Into<String>, flops: u64, input: &Tensor) -> Result<()> {
        let fr = firing_rate(input)?;
        self.record_spiking_rate(name, flops, fr);
        Ok(())
    }

    /// Record a spike-driven block with a pre-computed input firing rate
    /// (e.g. averaged over several spike operands).
    pub fn record_spiking_rate(&self, name: impl Into<String>, flops: u64, fr: f64) {
        let s = sops(fr, self.timesteps, flops);
        self.entries.borrow_mut().push(BlockEnergy {
            name: name.into(),
            kind: BlockKind::SpikeDriven,
            flops,
            fr,
            timesteps: self.timesteps,
            sops: s,
            energy_j: energy_snn(s),
        });
    }

    /// Record a block fed by dense values (charged at ANN rates, once per
    /// timestep since the network recomputes it every step).
    pub fn record_dense(&self, name: impl Into<String>, flops: u64) {
        self.entries.borrow_mut().push(BlockEnergy {
            name: name.into(),
            kind: BlockKind::DenseInput,
            flops,
            fr: 1.0,
            timesteps: self.timesteps,
            sops: 0.0,
            energy_j: energy_ann(flops as f64 * self.timesteps as f64),
        });
    }

    /// Record synapse-free arithmetic (norm, pooling, elementwise).
    pub fn record_overhead(&self, name: impl Into<String>, flops: u64) {
        self.entries.borrow_mut().push(BlockEnergy {
            name: name.into(),
            kind: BlockKind::Overhead,
            flops,
            fr: 0.0,
            timesteps: self.timesteps,
            sops: 0.0,
            energy_j: 0.0,
        });
    }

    pub fn into_report(self) -> EnergyReport {
        EnergyReport {
            timesteps: self.timesteps,
            blocks: self.entries.into_inner(),
        }
    }
}

/// Per-block and total energy accounting for one forward pass.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub timesteps: u32,
    pub blocks: Vec<BlockEnergy>,
}

impl EnergyReport {
    pub fn total_sops(&self) -> f64 {
        self.blocks.iter().map(|b| b.sops).sum()
    }

    pub fn total_energy_j(&self) -> f64 {
        self.blocks.iter().map(|b| b.energy_j).sum()
    }

    /// Every counted FLOP (synaptic and overhead), for the "what if this
    /// were a dense network" comparison; single pass, no timestep factor.
    pub fn ann_flops_total(&self) -> u64 {
        self.blocks.iter().map(|b| b.flops).sum()
    }

    pub fn ann_energy_j(&self) -> f64 {
        energy_ann(self.ann_flops_total() as f64)
    }

    /// Mean firing rate over spike-driven blocks, for quick health checks.
    pub fn mean_firing_rate(&self) -> f64 {
        let spiking: Vec<&BlockEnergy> = self
            .blocks
            .iter()
            .filter(|b| b.kind == BlockKind::SpikeDriven)
            .collect();
        if spiking.is_empty() {
            return 0.0;
        }
        spiking.iter().map(|b| b.fr).sum::<f64>() / spiking.len() as f64
    }

    /// CSV with the header `block,flops,fr,T,sops,energy_j`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,flops,fr,T,sops,energy_j\n");
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{:.3},{:.6e}",
                b.name, b.flops, b.fr, b.timesteps, b.sops, b.energy_j
            );
        }
        let _ = writeln!(
            out,
            "total,{},{:.6},{},{:.3},{:.6e}",
            self.ann_flops_total(),
            self.mean_firing_rate(),
            self.timesteps,
            self.total_sops(),
            self.total_energy_j()
        );
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<34} {:>6} {:>14} {:>8} {:>16} {:>12}",
            "block", "kind", "flops/frame", "fr", "sops", "energy"
        );
        for b in &self.blocks {
            let kind = match b.kind {
                BlockKind::SpikeDriven => "spike",
                BlockKind::DenseInput => "dense",
                BlockKind::Overhead => "aux",
            };
            let _ = writeln!(
                out,
                "{:<34} {:>6} {:>14} {:>8.4} {:>16.1} {:>12}",
                b.name,
                kind,
                b.flops,
                b.fr,
                b.sops,
                format_energy(b.energy_j)
            );
        }
        let _ = writeln!(
            out,
            "{:<34} {:>6} {:>14} {:>8.4} {:>16.1} {:>12}",
            "total",
            "",
            self.ann_flops_total(),
            self.mean_firing_rate(),
            self.total_sops(),
            format_energy(self.total_energy_j())
        );
        let _ = writeln!(
            out,
            "dense-equivalent energy (single pass): {}",
            format_energy(self.ann_energy_j())
        );
        out
    }
}

pub fn format_energy(joules: f64) -> String {
    let abs = joules.abs();
    if abs >= 1e-3 {
        format!("{:.3} mJ", joules * 1e3)
    } else if abs >= 1e-6 {
        format!("{:.3} uJ", joules * 1e6)
    } else if abs >= 1e-9 {
        format!("{:.3} nJ", joules * 1e9)
    } else if abs == 0.0 {
        "0 J".to_string()
    } else {
        format!("{:.3} pJ", joules * 1e12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_flops_formula() {
        // 1x1 conv, C_in=C_out=4, 2x2 spatial: 2*4*4*1*2*2 = 128.
        let d = LayerDescriptor::Conv {
            c_in: 4,
            c_out: 4,
            groups: 1,
            kernel: (1, 1),
            out_hw: (2, 2),
        };
        assert_eq!(count_flops(&d), 2 * 4 * 4 * 1 * 2 * 2);
        // 3x3 conv with padding keeps the formula shape-driven.
        let d3 = LayerDescriptor::Conv {
            c_in: 3,
            c_out: 8,
            groups: 1,
            kernel: (3, 3),
            out_hw: (16, 16),
        };
        assert_eq!(count_flops(&d3), 2 * 8 * 3 * 9 * 256);
    }

    #[test]
    fn matmul_flops_formula() {
        let d = LayerDescriptor::Matmul { batch: 1, m: 3, k: 5, p: 7 };
        assert_eq!(count_flops(&d), 2 * 3 * 5 * 7);
    }

    #[test]
    fn elementwise_flops_is_count() {
        assert_eq!(count_flops(&LayerDescriptor::Elementwise { elems: 99 }), 99);
    }

    #[test]
    fn firing_rate_limits() {
        assert_eq!(firing_rate(&Tensor::zeros(&[3, 4])).unwrap(), 0.0);
        assert_eq!(firing_rate(&Tensor::ones(&[3, 4])).unwrap(), 1.0);
        let mut data = vec![0.0f32; 12];
        data[0] = 1.0;
        data[5] = 1.0;
        data[7] = 1.0;
        let t = Tensor::new(&[12], data).unwrap();
        assert!((firing_rate(&t).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn firing_rate_rejects_non_binary() {
        let t = Tensor::new(&[2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(firing_rate(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn firing_rate_monotone_under_added_spikes() {
        let mut data = vec![0.0f32; 16];
        data[3] = 1.0;
        let a = Tensor::new(&[16], data.clone()).unwrap();
        data[9] = 1.0;
        let b = Tensor::new(&[16], data).unwrap();
        assert!(firing_rate(&b).unwrap() > firing_rate(&a).unwrap());
    }

    #[test]
    fn sops_formula() {
        assert_eq!(sops(0.2, 4, 1_000_000_000), 8e8);
        assert_eq!(sops(0.0, 4, 123), 0.0);
        assert_eq!(sops(1.0, 1, 777), 777.0);
    }

    #[test]
    fn energy_matches_reported_model_rows() {
        // 18.05 G SOPs -> 1.39 mJ; 66.88 G -> 5.15 mJ; 14.81 G -> 1.14 mJ.
        assert!((energy_snn(18.05e9) - 1.39e-3).abs() <= 0.01e-3);
        assert!((energy_snn(66.88e9) - 5.15e-3).abs() <= 0.01e-3);
        assert!((energy_snn(14.81e9) - 1.14e-3).abs() <= 0.01e-3);
        assert_eq!(energy_snn(0.0), 0.0);
    }

    #[test]
    fn energy_linear_in_every_argument() {
        let base = energy_snn(sops(0.3, 4, 1000));
        assert!((energy_snn(sops(0.6, 4, 1000)) - 2.0 * base).abs() < 1e-18);
        assert!((energy_snn(sops(0.3, 8, 1000)) - 2.0 * base).abs() < 1e-18);
        assert!((energy_snn(sops(0.3, 4, 2000)) - 2.0 * base).abs() < 1e-18);
    }

    #[test]
    fn report_totals_are_sums() {
        let probe = Probe::new(4);
        probe
            .record_spiking("a", 1000, &Tensor::ones(&[10]))
            .unwrap();
        probe.record_overhead("bn", 50);
        probe.record_dense("head", 200);
        let report = probe.into_report();
        assert_eq!(report.blocks.len(), 3);
        assert_eq!(report.total_sops(), 4000.0);
        assert_eq!(report.ann_flops_total(), 1250);
        let expect = energy_snn(4000.0) + energy_ann(200.0 * 4.0);
        assert!((report.total_energy_j() - expect).abs() < 1e-20);
    }

    #[test]
    fn zero_spike_input_means_zero_energy() {
        let probe = Probe::new(4);
        probe
            .record_spiking("conv", 123_456, &Tensor::zeros(&[64]))
            .unwrap();
        let report = probe.into_report();
        assert_eq!(report.total_sops(), 0.0);
        assert_eq!(report.total_energy_j(), 0.0);
    }

    #[test]
    fn csv_has_pinned_header() {
        let report = Probe::new(1).into_report();
        assert!(report.to_csv().starts_with("block,flops,fr,T,sops,energy_j\n"));
    }
}
