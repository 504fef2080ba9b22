//! Complexity scaling harness.
//!
//! Counts per-frame FLOPs of the local attention block and of the dense
//! global-attention reference over a grid of token counts, times both, and
//! fits log-log slopes. The local block scales linearly in tokens (slope
//! ~1); the global reference scales quadratically (slope ~2).

use std::time::Instant;

use crate::attention::{
    global_ssa_flops, global_ssa_reference, lsssa_flops, lsssa_forward, LSSSAConfig, LsssaParams,
};
use crate::error::Result;
use crate::neuron::LIFParams;
use crate::rng::XorShift64;
use crate::tensor::{SpikeTensor, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub tokens: usize,
    pub lsssa_flops: u64,
    pub lsssa_wall_ms: f64,
    pub gssa_flops: u64,
    pub gssa_wall_ms: f64,
}

fn random_spikes(shape: &[usize], density: f32, rng: &mut XorShift64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.next_f32() < density { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("binary tensor")
}

/// Run the scaling grid. `sides` are token-grid edge lengths (tokens =
/// side^2); the attention config is used as-is at every size.
pub fn run_scaling(cfg: &LSSSAConfig, sides: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = XorShift64::new(seed);
    let lif = LIFParams::default();
    let params = LsssaParams::new("bench", cfg.clone(), &lif, &mut rng)?;
    params.set_training(false);
    let scale = cfg.scale()?;
    let mut rows = Vec::with_capacity(sides.len());
    for &side in sides {
        let shape = [1usize, 1, cfg.embed_dim, side, side];
        let x = SpikeTensor::from_tensor(random_spikes(&shape, 0.3, &mut rng))?;
        let tape = Tape::no_grad();
        let t0 = Instant::now();
        lsssa_forward(&tape, &x, &params, None)?;
        let lsssa_wall_ms = t0.elapsed().as_secs_f64() * 1e3;

        let q = random_spikes(&shape, 0.3, &mut rng);
        let k = random_spikes(&shape, 0.3, &mut rng);
        let v = random_spikes(&shape, 0.3, &mut rng);
        let t1 = Instant::now();
        global_ssa_reference(&tape, &q, &k, &v, scale)?;
        let gssa_wall_ms = t1.elapsed().as_secs_f64() * 1e3;

        rows.push(BenchRow {
            tokens: side * side,
            lsssa_flops: lsssa_flops(cfg, side, side)?,
            lsssa_wall_ms,
            gssa_flops: global_ssa_flops(cfg.embed_dim, side, side),
            gssa_wall_ms,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

pub fn flop_slopes(rows: &[BenchRow]) -> (f64, f64) {
    let local: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.tokens as f64, r.lsssa_flops as f64))
        .collect();
    let global: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.tokens as f64, r.gssa_flops as f64))
        .collect();
    (log_log_slope(&local), log_log_slope(&global))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_pure_powers() {
        let lin: Vec<(f64, f64)> = [16.0, 64.0, 256.0].iter().map(|&x| (x, 3.0 * x)).collect();
        let quad: Vec<(f64, f64)> = [16.0, 64.0, 256.0].iter().map(|&x| (x, 0.5 * x * x)).collect();
        assert!((log_log_slope(&lin) - 1.0).abs() < 1e-9);
        assert!((log_log_slope(&quad) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_dim_doubles_attention_core_flops() {
        // Head width stays at 16 under the default head rule, so the
        // attention core is linear in the embedding dimension.
        let a = LSSSAConfig::new(64, 2, vec![1, 2]).unwrap();
        let b = LSSSAConfig::new(128, 2, vec![1, 2]).unwrap();
        let fa = crate::attention::lsssa_attention_core_flops(&a, 8, 8).unwrap() as f64;
        let fb = crate::attention::lsssa_attention_core_flops(&b, 8, 8).unwrap() as f64;
        let ratio = fb / fa;
        assert!((ratio - 2.0).abs() <= 0.05 * 2.0, "ratio {ratio}");
    }
}
