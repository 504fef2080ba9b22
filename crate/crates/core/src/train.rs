//! Training loop: cross-entropy on logits, AdamW with cosine schedule,
//! deterministic shuffling from the run seed.

use crate::data::{replicate_static, DatasetContainer};
use crate::error::{Error, Result};
use crate::model::LSFormer;
use crate::optim::{cosine_lr, AdamW};
use crate::param::HasParams;
use crate::rng::XorShift64;
use crate::shape_err;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub min_lr: f32,
    pub warmup_epochs: usize,
    pub weight_decay: f32,
    pub seed: u64,
    /// Total epochs the schedule spans; lets resumed runs continue the
    /// same cosine curve. Defaults to `epochs` when zero.
    pub schedule_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_epochs: 3,
            weight_decay: 0.004,
            seed: 1,
            schedule_epochs: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f32,
}

/// Stack dataset samples into a `[T,B,C,H,W]` input batch. Rank-3 samples
/// are replicated along T; rank-4 samples must already carry T frames.
pub fn batch_input(
    ds: &DatasetContainer,
    indices: &[usize],
    timesteps: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(shape_err!("batch_input: empty index list"));
    }
    let labels: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
    let per_sample: Vec<Tensor> = indices
        .iter()
        .map(|&i| {
            let s = ds.sample_tensor(i);
            match s.rank() {
                3 => replicate_static(&s, timesteps),
                4 => {
                    if s.shape()[0] != timesteps {
                        return Err(shape_err!(
                            "sample has {} frames, model expects {timesteps}",
                            s.shape()[0]
                        ));
                    }
                    Ok(s)
                }
                r => Err(shape_err!("sample rank {r} unsupported")),
            }
        })
        .collect::<Result<_>>()?;
    // [T,C,H,W] per sample -> [T,B,C,H,W]
    let chw: usize = per_sample[0].shape()[1..].iter().product();
    let b = per_sample.len();
    let mut data = vec![0.0f32; timesteps * b * chw];
    for (bi, s) in per_sample.iter().enumerate() {
        for t in 0..timesteps {
            let src = &s.data()[t * chw..(t + 1) * chw];
            let dst = &mut data[(t * b + bi) * chw..(t * b + bi + 1) * chw];
            dst.copy_from_slice(src);
        }
    }
    let mut shape = vec![timesteps, b];
    shape.extend_from_slice(&per_sample[0].shape()[1..]);
    Ok((Tensor::new(&shape, data)?, labels))
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    (0..b)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    /// confusion[truth][predicted]
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

/// Top-1 accuracy and confusion counts over a dataset. Switches batch norm
/// to eval statistics for the duration.
pub fn evaluate(model: &LSFormer, ds: &DatasetContainer, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Format("evaluate: dataset is empty".into()));
    }
    model.set_training(false);
    let classes = model.cfg.num_classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (input, labels) = batch_input(ds, chunk, model.cfg.timesteps)?;
        let tape = Tape::no_grad();
        let logits = model.forward(&tape, &input, None)?;
        for (pred, &truth) in argmax_rows(&logits).iter().zip(&labels) {
            if truth >= classes {
                return Err(Error::Format(format!(
                    "label {truth} outside {classes} classes"
                )));
            }
            confusion[truth][*pred] += 1;
            if *pred == truth {
                correct += 1;
            }
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        confusion,
        n: ds.len(),
    })
}

/// Run `cfg.epochs` training epochs starting at `start_epoch`. Calls
/// `on_epoch` after each epoch with the freshly computed log row.
pub fn train_loop(
    model: &LSFormer,
    opt: &mut AdamW,
    train_set: &DatasetContainer,
    val_set: Option<&DatasetContainer>,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train_set.is_empty() {
        return Err(Error::Format("train: dataset is empty".into()));
    }
    let schedule_total = if cfg.schedule_epochs == 0 {
        start_epoch + cfg.epochs
    } else {
        cfg.schedule_epochs
    };
    let params = model.params();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let lr = cosine_lr(epoch, schedule_total, cfg.warmup_epochs, cfg.lr, cfg.min_lr);
        let mut rng = XorShift64::new(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        rng.shuffle(&mut order);
        model.set_training(true);

        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (input, labels) = batch_input(train_set, chunk, model.cfg.timesteps)?;
            let tape = Tape::new();
            let logits = model.forward(&tape, &input, None)?;
            let (loss, loss_value) = tape.cross_entropy_logits(&logits, &labels)?;
            if !loss_value.is_finite() {
                return Err(Error::Contract(format!(
                    "train: non-finite loss {loss_value} at epoch {epoch} (lr {lr})"
                )));
            }
            let grads = tape.backward(&loss)?;
            opt.step(&params, &grads, lr);
            epoch_loss += loss_value * chunk.len() as f64;
            for (pred, &truth) in argmax_rows(&logits).iter().zip(&labels) {
                if *pred == truth {
                    correct += 1;
                }
            }
        }
        let train_acc = correct as f64 / train_set.len() as f64;
        let val_acc = match val_set {
            Some(vs) => evaluate(model, vs, cfg.batch_size)?.accuracy,
            None => f64::NAN,
        };
        let log = EpochLog {
            epoch,
            loss: epoch_loss / train_set.len() as f64,
            train_acc,
            val_acc,
            lr,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
