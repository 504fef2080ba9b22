//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lsformer_core::bench::{flop_slopes, run_scaling};
use lsformer_core::checkpoint::Checkpoint;
use lsformer_core::data::{load_container, save_container, synth_dataset, DatasetContainer, SynthKind};
use lsformer_core::error::Error;
use lsformer_core::gradcheck::{check_params, corrupt_identity};
use lsformer_core::metrics::{energy_snn, format_energy};
use lsformer_core::model::{profile_model, LSFormer, ModelConfig};
use lsformer_core::neuron::SpikeMode;
use lsformer_core::optim::AdamW;
use lsformer_core::param::HasParams;
use lsformer_core::tensor::Tensor;
use lsformer_core::train::{batch_input, evaluate, train_loop, TrainConfig};

use crate::args::{content_hash, Args};
use crate::{CmdError, CmdResult};

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

/// Model config plus training hyperparameters; the full resolved form is
/// echoed at run start and embedded in every artifact.
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    threads: usize,
}

impl RunConfig {
    fn preset(name: &str) -> Result<Self, CmdError> {
        let model = match name {
            "toy" => ModelConfig::toy(),
            "micro" => ModelConfig::micro(),
            "lsformer-4-384" => ModelConfig::lsformer_4_384(),
            "lsformer-2-256" => ModelConfig::lsformer_2_256(),
            other => {
                return Err(CmdError::Usage(format!(
                    "unknown preset `{other}` (toy, micro, lsformer-4-384, lsformer-2-256)"
                )))
            }
        };
        Ok(Self {
            model,
            train: TrainConfig::default(),
            threads: 1,
        })
    }

    /// Apply one `key=value`; model keys first, then run keys.
    fn apply_key(&mut self, key: &str, value: &str) -> Result<(), CmdError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CmdError> {
            v.parse()
                .map_err(|_| CmdError::Core(Error::Format(format!("bad value for {key}: {v}"))))
        }
        match key {
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "min_lr" => self.train.min_lr = parse(key, value)?,
            "warmup_epochs" => self.train.warmup_epochs = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "schedule_epochs" => self.train.schedule_epochs = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => self.model.apply_key(key, value)?,
        }
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> Result<(), CmdError> {
        let text = fs::read_to_string(path).map_err(|e| CmdError::Core(e.into()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CmdError::Core(Error::Format(format!(
                    "{}:{}: missing '='",
                    path.display(),
                    lineno + 1
                )))
            })?;
            self.apply_key(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Canonical resolved text: model keys plus run keys, sorted.
    fn resolved_text(&self) -> String {
        let mut out = self.model.to_config_text();
        let mut run: Vec<(&str, String)> = vec![
            ("batch_size", self.train.batch_size.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("lr", format!("{:?}", self.train.lr)),
            ("min_lr", format!("{:?}", self.train.min_lr)),
            ("schedule_epochs", self.train.schedule_epochs.to_string()),
            ("seed", self.train.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("warmup_epochs", self.train.warmup_epochs.to_string()),
            ("weight_decay", format!("{:?}", self.train.weight_decay)),
        ];
        run.sort_by(|a, b| a.0.cmp(b.0));
        for (k, v) in run {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn comment_block(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn init_threads(n: usize) {
    // Ignore the error when a global pool already exists (tests).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn check_dataset_compat(cfg: &ModelConfig, ds: &DatasetContainer, name: &str) -> Result<(), Error> {
    let want = [cfg.in_channels, cfg.image_h, cfg.image_w];
    let ok = match ds.shape.len() {
        3 => ds.shape == want,
        4 => ds.shape[0] == cfg.timesteps && ds.shape[1..] == want,
        _ => false,
    };
    if !ok {
        return Err(Error::Config(format!(
            "{name}: sample shape {:?} conflicts with model [C={},H={},W={}] at T={}",
            ds.shape, cfg.in_channels, cfg.image_h, cfg.image_w, cfg.timesteps
        )));
    }
    if ds.num_classes() > cfg.num_classes {
        return Err(Error::Config(format!(
            "{name}: labels reach {} classes, model has {}",
            ds.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(raw: &[String]) -> CmdResult {
    let mut args = Args::parse(raw, &[])?;
    if args.help_requested() {
        println!(
            "lsformer gen-data --kind <oriented-bars|multi-scale-blobs> --classes N --n PER_CLASS \
             --size PX --seed S --out FILE"
        );
        return Ok(());
    }
    let kind = SynthKind::parse(&args.required("kind")?).map_err(CmdError::Core)?;
    let classes: usize = args.parse_or("classes", 0)?;
    let n: usize = args.parse_or("n", 0)?;
    let size: usize = args.parse_or("size", 16)?;
    let seed: u64 = args.parse_or("seed", 1)?;
    let out = PathBuf::from(args.required("out")?);
    args.reject_unknown()?;
    if classes == 0 || n == 0 {
        return Err(CmdError::Usage(
            "--classes and --n must be at least 1".into(),
        ));
    }
    let ds = synth_dataset(kind, n, classes, size, seed)?;
    save_container(&ds, &out)?;
    let bytes = fs::read(&out).map_err(Error::from)?;
    let density: f64 = ds
        .samples
        .iter()
        .map(|(img, _)| img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64)
        .sum::<f64>()
        / ds.len() as f64;
    println!("wrote {}", out.display());
    println!("samples: {} ({} classes x {} each)", ds.len(), classes, n);
    println!("sample shape: {:?}, mean density {:.4}", ds.shape, density);
    println!("content hash: {:016x}", content_hash(&bytes));
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(raw: &[String]) -> CmdResult {
    let mut args = Args::parse(raw, &[])?;
    if args.help_requested() {
        println!(
            "lsformer train --data FILE [--val-data FILE] --out-dir DIR [--preset NAME] \
             [--config FILE] [--resume CKPT] [--<config-key> VALUE ...]\n\
             any model or run configuration key is accepted as a flag, e.g. \
             --epochs 50 --lr 0.002 --attn_enable_sda false"
        );
        return Ok(());
    }
    let data_path = PathBuf::from(args.required("data")?);
    let val_path = args.take("val-data").map(PathBuf::from);
    let out_dir = PathBuf::from(args.required("out-dir")?);
    let preset = args.take("preset").unwrap_or_else(|| "toy".to_string());
    let config_path = args.take("config").map(PathBuf::from);
    let resume = args.take("resume").map(PathBuf::from);

    let mut rc = RunConfig::preset(&preset)?;
    if let Some(p) = &config_path {
        rc.load_file(p)?;
    }
    // Every remaining flag must be a config key (run or model).
    for (k, v) in args.drain() {
        rc.apply_key(&k, &v)
            .map_err(|_| CmdError::Usage(format!("unknown flag or config key --{k}")))?;
    }
    rc.model.validate()?;
    init_threads(rc.threads);

    let resolved = rc.resolved_text();
    println!("# resolved configuration\n{resolved}");
    if !rc.model.attn_config()?.oversized_rates().is_empty() {
        eprintln!(
            "warning: dilation rates above 3 sample very sparsely on small token grids ({:?})",
            rc.model.attn_config()?.oversized_rates()
        );
    }

    let train_set = load_container(&data_path)?;
    check_dataset_compat(&rc.model, &train_set, "train data")?;
    let val_set = match &val_path {
        Some(p) => {
            let ds = load_container(p)?;
            check_dataset_compat(&rc.model, &ds, "val data")?;
            Some(ds)
        }
        None => None,
    };

    fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let (model, mut opt, start_epoch) = match &resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            let model = ckpt.restore_model()?;
            let params = model.params();
            let mut opt = AdamW::new(&params, rc.train.weight_decay);
            opt.load_state(&params, |name| ckpt.get(name).cloned());
            let epoch = ckpt
                .get("train.epoch")
                .map(|t| t.scalar_value() as usize)
                .unwrap_or(0);
            drop(params);
            (model, opt, epoch)
        }
        None => {
            let model = LSFormer::new(rc.model.clone(), rc.train.seed)?;
            let opt = AdamW::new(&model.params(), rc.train.weight_decay);
            (model, opt, 0)
        }
    };

    let mut log_csv = comment_block(&resolved);
    log_csv.push_str("epoch,loss,train_acc,val_acc,lr\n");
    let t0 = std::time::Instant::now();
    let logs = train_loop(
        &model,
        &mut opt,
        &train_set,
        val_set.as_ref(),
        &rc.train,
        start_epoch,
        |log| {
            println!(
                "epoch {:>3}  loss {:.4}  train {:.4}  val {}  lr {:.6}  [{:.0}s]",
                log.epoch,
                log.loss,
                log.train_acc,
                if log.val_acc.is_nan() {
                    "  --  ".to_string()
                } else {
                    format!("{:.4}", log.val_acc)
                },
                log.lr,
                t0.elapsed().as_secs_f64()
            );
        },
    )?;
    for log in &logs {
        let _ = writeln!(
            log_csv,
            "{},{:.6},{:.4},{:.4},{:.6}",
            log.epoch, log.loss, log.train_acc, log.val_acc, log.lr
        );
    }
    let log_path = out_dir.join("train_log.csv");
    fs::write(&log_path, log_csv).map_err(Error::from)?;

    let params = model.params();
    let mut extras = opt.state_tensors(&params);
    extras.push((
        "train.epoch".to_string(),
        Tensor::scalar((start_epoch + rc.train.epochs) as f32),
    ));
    drop(params);
    let ckpt_path = out_dir.join("model.lsfk");
    Checkpoint::capture(&model, &extras).save(&ckpt_path)?;
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(raw: &[String]) -> CmdResult {
    let mut args = Args::parse(raw, &[])?;
    if args.help_requested() {
        println!("lsformer eval --checkpoint FILE --data FILE [--batch-size N] [--threads N]");
        return Ok(());
    }
    let ckpt_path = PathBuf::from(args.required("checkpoint")?);
    let data_path = PathBuf::from(args.required("data")?);
    let batch: usize = args.parse_or("batch-size", 32)?;
    let threads: usize = args.parse_or("threads", 1)?;
    args.reject_unknown()?;
    init_threads(threads);

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ckpt.restore_model()?;
    let ds = load_container(&data_path)?;
    check_dataset_compat(&model.cfg, &ds, "eval data")?;
    let report = evaluate(&model, &ds, batch)?;
    println!(
        "top-1 accuracy: {:.4} over {} samples",
        report.accuracy, report.n
    );
    println!("confusion (rows = truth, cols = predicted):");
    for (truth, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        println!("  class {truth}: {}", cells.join(" "));
    }

    // Mean firing rate per block on one batch, spiking mode only.
    if model.mode() == SpikeMode::Spiking {
        let idx: Vec<usize> = (0..ds.len().min(batch)).collect();
        let (input, _) = batch_input(&ds, &idx, model.cfg.timesteps)?;
        let energy = profile_model(&model, &input)?;
        println!("mean firing rate per block:");
        for b in energy
            .blocks
            .iter()
            .filter(|b| b.kind == lsformer_core::metrics::BlockKind::SpikeDriven)
        {
            println!("  {:<32} fr {:.4}", b.name, b.fr);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn bench(raw: &[String]) -> CmdResult {
    let mut args = Args::parse(raw, &[])?;
    if args.help_requested() {
        println!(
            "lsformer bench [--dim D] [--groups N] [--rates 1,2] [--sides 4,8,16,32] \
             [--seed S] [--out FILE.csv] [--threads N]"
        );
        return Ok(());
    }
    let dim: usize = args.parse_or("dim", 64)?;
    let groups: usize = args.parse_or("groups", 2)?;
    let rates_s = args.take("rates").unwrap_or_else(|| "1,2".to_string());
    let sides_s = args.take("sides").unwrap_or_else(|| "4,8,16,32".to_string());
    let seed: u64 = args.parse_or("seed", 1)?;
    let out = args.take("out").map(PathBuf::from);
    let threads: usize = args.parse_or("threads", 1)?;
    args.reject_unknown()?;
    init_threads(threads);

    let parse_list = |s: &str, what: &str| -> Result<Vec<usize>, CmdError> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CmdError::Usage(format!("bad {what} list `{s}`")))
            })
            .collect()
    };
    let rates = parse_list(&rates_s, "rates")?;
    let sides = parse_list(&sides_s, "sides")?;

    let cfg = lsformer_core::attention::LSSSAConfig::new(dim, groups, rates)?;
    let rows = run_scaling(&cfg, &sides, seed)?;
    let (local_slope, global_slope) = flop_slopes(&rows);

    let mut csv = format!(
        "# dim={dim} groups={groups} windows={}x{} heads={}\n",
        cfg.window_h, cfg.window_v, cfg.heads
    );
    csv.push_str("tokens,lsssa_flops,lsssa_wall_ms,gssa_flops,gssa_wall_ms\n");
    println!("{:>8} {:>14} {:>12} {:>14} {:>12}", "tokens", "local flops", "local ms", "global flops", "global ms");
    for r in &rows {
        println!(
            "{:>8} {:>14} {:>12.2} {:>14} {:>12.2}",
            r.tokens, r.lsssa_flops, r.lsssa_wall_ms, r.gssa_flops, r.gssa_wall_ms
        );
        let _ = writeln!(
            csv,
            "{},{},{:.3},{},{:.3}",
            r.tokens, r.lsssa_flops, r.lsssa_wall_ms, r.gssa_flops, r.gssa_wall_ms
        );
    }
    println!(
        "counted-FLOP log-log slopes: local attention {local_slope:.3} (linear), \
         global reference {global_slope:.3} (quadratic)"
    );
    let _ = writeln!(csv, "# slope_local={local_slope:.4} slope_global={global_slope:.4}");
    if let Some(path) = out {
        fs::write(&path, csv).map_err(Error::from)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn gradcheck(raw: &[String]) -> CmdResult {
    let mut args = Args::parse(raw, &["inject-fault"])?;
    if args.help_requested() {
        println!(
            "lsformer gradcheck [--preset micro] [--tol 1e-3] [--h 1e-3] \
             [--max-per-group N] [--seed S] [--inject-fault]"
        );
        return Ok(());
    }
    let preset = args.take("preset").unwrap_or_else(|| "micro".to_string());
    let tol: f64 = args.parse_or("tol", 1e-3)?;
    let h: f64 = args.parse_or("h", 1e-3)?;
    let max_per_group: usize = args.parse_or("max-per-group", 8)?;
    let seed: u64 = args.parse_or("seed", 7)?;
    let inject = args.switch("inject-fault");
    args.reject_unknown()?;

    let rc = RunConfig::preset(&preset)?;
    let model = LSFormer::new(rc.model.clone(), seed)?;
    // Finite differences need the smooth surrogate everywhere.
    model.set_mode(SpikeMode::Relaxed);
    model.set_training(true);

    let ds = synth_dataset(SynthKind::OrientedBars, 1, 4, rc.model.image_h, seed)?;
    let idx: Vec<usize> = (0..4).collect();
    let (input, labels) = batch_input(&ds, &idx, rc.model.timesteps)?;

    let params = model.params();
    println!(
        "checking {} parameter groups ({} scalars), relaxed mode, h={h:e}, tol={tol:e}",
        params.len(),
        model.count_parameters()
    );
    let report = check_params(
        &params,
        |tape| {
            let features = model.features(tape, &input, None)?;
            let logits = if inject {
                // Fault fixture: a deliberately wrong backward on the head
                // weight; the report must name head.weight.
                let pooled = tape.gap_spatial(&features)?;
                let mean = tape.mean_axis0(&pooled)?;
                let w = corrupt_identity(tape, &model.head_weight.taped(tape));
                let logits = tape.matmul_batched(&mean, &w)?;
                tape.add_bias(&logits, &model.head_bias.taped(tape))?
            } else {
                model.classify(tape, &features, None)?
            };
            let (loss, v) = tape.cross_entropy_logits(&logits, &labels)?;
            Ok((loss, v))
        },
        h,
        tol,
        max_per_group,
    )?;
    for g in &report.groups {
        println!(
            "  {} {:<38} max rel err {:.3e} ({} elems)",
            if g.max_rel_err <= tol { "PASS" } else { "FAIL" },
            g.name,
            g.max_rel_err,
            g.checked
        );
    }
    if report.passed() {
        println!("gradcheck passed: {} groups within {tol:e}", report.groups.len());
        Ok(())
    } else {
        let failing: Vec<String> = report.failing().iter().map(|g| g.name.clone()).collect();
        Err(CmdError::Core(Error::CheckFailed(format!(
            "gradient mismatch in {}",
            failing.join(", ")
        ))))
    }
}

// ---------------------------------------------------------------------------
// energy
// ---------------------------------------------------------------------------

/// The published reference rows: SOPs in G against expected mJ.
pub const REFERENCE_ROWS: [(f64, f64); 3] = [(14.81, 1.14), (18.05, 1.39), (66.88, 5.15)];

pub fn energy(raw: &[String]) -> CmdResult {
    let mut args = Args::parse(raw, &[])?;
    if args.help_requested() {
        println!(
            "lsformer energy --data FILE [--checkpoint FILE | --preset NAME] \
             [--sample N] [--mode spiking|relaxed] [--out-prefix PATH] [--threads N]"
        );
        return Ok(());
    }
    let data_path = PathBuf::from(args.required("data")?);
    let ckpt_path = args.take("checkpoint").map(PathBuf::from);
    let preset = args.take("preset").unwrap_or_else(|| "toy".to_string());
    let sample: usize = args.parse_or("sample", 0)?;
    let mode = args.take("mode").unwrap_or_else(|| "spiking".to_string());
    let out_prefix = args.take("out-prefix").map(PathBuf::from);
    let threads: usize = args.parse_or("threads", 1)?;
    args.reject_unknown()?;
    init_threads(threads);

    // Arithmetic self-test against the published rows first.
    println!("reference-row self-test (SOPs -> energy):");
    for (gsops, expect_mj) in REFERENCE_ROWS {
        let got_mj = energy_snn(gsops * 1e9) * 1e3;
        let ok = (got_mj - expect_mj).abs() <= 0.01;
        println!("  {gsops:>6.2} G SOPs -> {got_mj:.4} mJ (expected {expect_mj:.2}) {}",
            if ok { "ok" } else { "MISMATCH" });
        if !ok {
            return Err(CmdError::Core(Error::CheckFailed(format!(
                "energy arithmetic: {gsops} G SOPs gave {got_mj:.4} mJ, expected {expect_mj}"
            ))));
        }
    }

    let model = match &ckpt_path {
        Some(p) => Checkpoint::load(p)?.restore_model()?,
        None => LSFormer::new(RunConfig::preset(&preset)?.model, 1)?,
    };
    match mode.as_str() {
        "spiking" => model.set_mode(SpikeMode::Spiking),
        "relaxed" => model.set_mode(SpikeMode::Relaxed),
        other => return Err(CmdError::Usage(format!("bad --mode {other}"))),
    }
    model.set_training(false);

    let ds = load_container(&data_path)?;
    check_dataset_compat(&model.cfg, &ds, "energy data")?;
    if sample >= ds.len() {
        return Err(CmdError::Core(Error::Format(format!(
            "--sample {sample} out of range ({} samples)",
            ds.len()
        ))));
    }
    let (input, _) = batch_input(&ds, &[sample], model.cfg.timesteps)?;
    let report = profile_model(&model, &input)?;
    println!("{}", report.to_table());
    println!(
        "total: {:.3} G SOPs, {}",
        report.total_sops() / 1e9,
        format_energy(report.total_energy_j())
    );
    if let Some(prefix) = out_prefix {
        let csv_path = prefix.with_extension("csv");
        let txt_path = prefix.with_extension("txt");
        let mut csv = comment_block(&model.cfg.to_config_text());
        csv.push_str(&report.to_csv());
        fs::write(&csv_path, csv).map_err(Error::from)?;
        fs::write(&txt_path, report.to_table()).map_err(Error::from)?;
        println!("wrote {} and {}", csv_path.display(), txt_path.display());
    }
    Ok(())
}
