//! End-to-end model behavior: geometry, determinism, the spike-driven
//! contract, residual identities, parameter counts and profiling.

mod common;

use common::random_binary;
use lsformer_core::data::{synth_dataset, SynthKind};
use lsformer_core::metrics::BlockKind;
use lsformer_core::model::{profile_model, HeadMode, LSFormer, ModelConfig};
use lsformer_core::neuron::SpikeMode;
use lsformer_core::param::HasParams;
use lsformer_core::rng::XorShift64;
use lsformer_core::tensor::{Tape, Tensor};
use lsformer_core::train::batch_input;

fn toy_batch(model: &LSFormer, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let ds = synth_dataset(SynthKind::OrientedBars, n.div_ceil(4), 4, 16, seed).unwrap();
    let idx: Vec<usize> = (0..n.min(ds.len())).collect();
    batch_input(&ds, &idx, model.cfg.timesteps).unwrap()
}

#[test]
fn tokenizer_produces_binary_tokens_of_expected_size() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let (input, _) = toy_batch(&model, 4, 5);
    let tape = Tape::no_grad();
    let u0 = model.tokenizer.forward(&tape, &input, None).unwrap();
    assert_eq!(u0.tensor().shape(), &[2, 4, 64, 4, 4]);
    assert!(u0.tensor().is_binary());
}

#[test]
fn tokenizer_of_zero_frames_is_silent() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let tape = Tape::no_grad();
    let input = Tensor::zeros(&[2, 1, 1, 16, 16]);
    let u0 = model.tokenizer.forward(&tape, &input, None).unwrap();
    assert!(u0.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let (input, _) = toy_batch(&model, 8, 6);
    let run = || {
        let tape = Tape::no_grad();
        model.forward(&tape, &input, None).unwrap().data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn logits_shape_and_spatial_permutation_invariance() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let (input, _) = toy_batch(&model, 4, 7);
    let tape = Tape::no_grad();
    let features = model.features(&tape, &input, None).unwrap();
    let logits = model.classify(&tape, &features, None).unwrap();
    assert_eq!(logits.shape(), &[4, 4]);
    // Permute spatial positions of the final features: GAP is invariant.
    let perm = tape.permute(&features, &[0, 1, 2, 4, 3]).unwrap();
    let logits_p = model.classify(&tape, &perm, None).unwrap();
    for (a, b) in logits.data().iter().zip(logits_p.data()) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn classify_constant_field_matches_direct_head() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let tape = Tape::no_grad();
    let (t, b, d) = (2, 3, 64);
    let features = Tensor::full(&[t, b, d, 4, 4], 0.7);
    let logits = model.classify(&tape, &features, None).unwrap();
    // GAP of a constant field is the constant; head(c * ones).
    let w = model.head_weight.value();
    let bias = model.head_bias.value();
    for bi in 0..b {
        for cl in 0..4 {
            let mut expect = bias.data()[cl];
            for ci in 0..d {
                expect += 0.7 * w.at(&[ci, cl]);
            }
            assert!((logits.at(&[bi, cl]) - expect).abs() <= 1e-3);
        }
    }
}

#[test]
fn timestep_mean_matches_manual_per_timestep_average() {
    let mut cfg = ModelConfig::toy();
    cfg.head_mode = HeadMode::MeanFeatures;
    let model = LSFormer::new(cfg, 3).unwrap();
    let mut rng = XorShift64::new(8);
    let features = random_binary(&[2, 3, 64, 4, 4], 0.5, &mut rng);
    let tape = Tape::no_grad();
    let pooled = tape.gap_spatial(&features).unwrap(); // [T,B,D]
    // manual mean over T
    let mut manual = vec![0.0f32; 3 * 64];
    for t in 0..2 {
        for i in 0..3 * 64 {
            manual[i] += pooled.data()[t * 3 * 64 + i] / 2.0;
        }
    }
    let mean = tape.mean_axis0(&pooled).unwrap();
    for (a, b) in mean.data().iter().zip(&manual) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn mean_logits_head_mode_runs_and_differs_only_by_linearity() {
    // With a linear head, averaging features before the head equals
    // averaging per-timestep logits after it.
    let mut cfg = ModelConfig::toy();
    cfg.head_mode = HeadMode::MeanLogits;
    let logits_mode = LSFormer::new(cfg.clone(), 3).unwrap();
    cfg.head_mode = HeadMode::MeanFeatures;
    let feat_mode = LSFormer::new(cfg, 3).unwrap();
    let (input, _) = toy_batch(&feat_mode, 4, 9);
    let tape = Tape::no_grad();
    let a = feat_mode.forward(&tape, &input, None).unwrap();
    let b = logits_mode.forward(&tape, &input, None).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-4);
    }
}

#[test]
fn per_timestep_tokenizer_outputs_agree_across_t_settings_in_eval() {
    // Fresh neuron state per call means t=0 computation cannot depend on
    // T; with eval-mode batch norm the t=0 frames must match exactly.
    let mut cfg = ModelConfig::toy();
    cfg.timesteps = 1;
    let m1 = LSFormer::new(cfg.clone(), 3).unwrap();
    cfg.timesteps = 4;
    let m4 = LSFormer::new(cfg, 3).unwrap();
    // Same initialization seed -> identical parameters.
    m1.set_training(false);
    m4.set_training(false);
    let ds = synth_dataset(SynthKind::OrientedBars, 2, 4, 16, 4).unwrap();
    let (i1, _) = batch_input(&ds, &[0, 1], 1).unwrap();
    let (i4, _) = batch_input(&ds, &[0, 1], 4).unwrap();
    let tape = Tape::no_grad();
    let u1 = m1.tokenizer.forward(&tape, &i1, None).unwrap();
    let u4 = m4.tokenizer.forward(&tape, &i4, None).unwrap();
    let frame = 2 * 64 * 4 * 4; // B*C*H'*W'
    assert_eq!(&u1.tensor().data()[..frame], &u4.tensor().data()[..frame]);
}

#[test]
fn zeroed_attention_projection_makes_identity_residual() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let block = &model.blocks[0];
    block.attn.out_conv.weight.set_value(Tensor::zeros(&block.attn.out_conv.weight.shape()));
    block.attn.out_bn.gamma.set_value(Tensor::zeros(&[64]));
    let mut rng = XorShift64::new(10);
    let u_prev = random_binary(&[2, 2, 64, 4, 4], 0.4, &mut rng);
    let tape = Tape::no_grad();
    // Attention half only: U = LSSSA(SN(U_prev)) + U_prev must equal U_prev.
    let attn_in = lsformer_core::neuron::lif_sequence(&tape, &u_prev, &block.sn_pre_attn).unwrap();
    let attn_out =
        lsformer_core::attention::lsssa_forward(&tape, &attn_in, &block.attn, None).unwrap();
    let u = tape.add(&attn_out, &u_prev).unwrap();
    for (a, b) in u.data().iter().zip(u_prev.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn shape_invariance_through_four_blocks() {
    let mut cfg = ModelConfig::toy();
    cfg.num_blocks = 4;
    let model = LSFormer::new(cfg, 3).unwrap();
    let (input, _) = toy_batch(&model, 2, 11);
    let tape = Tape::no_grad();
    let features = model.features(&tape, &input, None).unwrap();
    assert_eq!(features.shape(), &[2, 2, 64, 4, 4]);
}

#[test]
fn preset_parameter_count_near_reference() {
    // The 4-block, 384-dim preset lands on 9.50M parameters within 10%.
    let model = LSFormer::new(ModelConfig::lsformer_4_384(), 1).unwrap();
    let count = model.count_parameters() as f64;
    let reference = 9.50e6;
    let dev = (count - reference).abs() / reference;
    assert!(
        dev <= 0.10,
        "parameter count {count} deviates {:.2}% from {reference}",
        dev * 100.0
    );
}

#[test]
fn spike_contract_holds_through_a_full_forward() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let (input, _) = toy_batch(&model, 8, 12);
    let report = profile_model(&model, &input).unwrap();
    // Every spike-driven block saw a valid firing rate (the probe already
    // rejects non-binary inputs); rates are within [0,1].
    let spiking: Vec<_> = report
        .blocks
        .iter()
        .filter(|b| b.kind == BlockKind::SpikeDriven)
        .collect();
    assert!(!spiking.is_empty());
    for b in &spiking {
        assert!(b.fr >= 0.0 && b.fr <= 1.0, "{}: fr {}", b.name, b.fr);
    }
    // Q/K/V-style entries exist for each encoder block.
    assert!(report.blocks.iter().any(|b| b.name == "block0.qkv"));
    assert!(report.blocks.iter().any(|b| b.name == "block1.qkv"));
}

#[test]
fn profile_refuses_relaxed_mode() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    model.set_mode(SpikeMode::Relaxed);
    let (input, _) = toy_batch(&model, 2, 13);
    assert!(profile_model(&model, &input).is_err());
}

#[test]
fn profile_totals_are_block_sums() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let (input, _) = toy_batch(&model, 2, 14);
    let report = profile_model(&model, &input).unwrap();
    let sops_sum: f64 = report.blocks.iter().map(|b| b.sops).sum();
    let energy_sum: f64 = report.blocks.iter().map(|b| b.energy_j).sum();
    assert_eq!(report.total_sops(), sops_sum);
    assert_eq!(report.total_energy_j(), energy_sum);
    assert!(report.total_energy_j() > 0.0);
    // Per-block bookkeeping: sops = fr * T * flops, exactly, and the
    // spiking energy follows at 77 fJ per operation.
    for b in &report.blocks {
        if b.kind == BlockKind::SpikeDriven {
            let manual = b.fr * b.timesteps as f64 * b.flops as f64;
            assert!((b.sops - manual).abs() <= manual.abs() * 1e-12 + 1e-9, "{}", b.name);
            assert!((b.energy_j - 77e-15 * b.sops).abs() <= 1e-24, "{}", b.name);
        }
    }
}

#[test]
fn random_weights_score_at_chance_on_balanced_data() {
    // Untrained model on balanced 4-class data: 25% +- 10% at n = 800.
    let model = LSFormer::new(ModelConfig::toy(), 99).unwrap();
    let ds = synth_dataset(SynthKind::OrientedBars, 200, 4, 16, 31).unwrap();
    let report = lsformer_core::train::evaluate(&model, &ds, 64).unwrap();
    assert_eq!(report.n, 800);
    assert!(
        (report.accuracy - 0.25).abs() <= 0.10,
        "accuracy {} outside 25% +- 10%",
        report.accuracy
    );
}

#[test]
fn mismatched_input_shape_is_descriptive() {
    let model = LSFormer::new(ModelConfig::toy(), 3).unwrap();
    let tape = Tape::no_grad();
    let bad = Tensor::zeros(&[2, 1, 3, 16, 16]); // wrong channel count
    let err = model.forward(&tape, &bad, None).unwrap_err();
    assert!(err.to_string().contains("does not match config"));
}

#[test]
fn relaxed_mode_micro_model_runs_forward() {
    let model = LSFormer::new(ModelConfig::micro(), 3).unwrap();
    model.set_mode(SpikeMode::Relaxed);
    let (input, labels) = toy_batch(&model, 4, 15);
    let tape = Tape::new();
    let logits = model.forward(&tape, &input, None).unwrap();
    let (_, loss) = tape.cross_entropy_logits(&logits, &labels).unwrap();
    assert!(loss.is_finite());
}
