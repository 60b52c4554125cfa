//! Training loop: SGD with momentum and weight decay under a polynomial
//! learning-rate schedule. Deterministic end to end: weight init, batch
//! order and augmentation all derive from the configured seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::ModelError;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::Config;
use crate::data::{augment, tile_image, AugmentParams, DataError, Manifest, SegBatch, SegSample};
use crate::loss::{total_loss, LossError, LossWeights};
use crate::model::SegModel;
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("poly schedule: total iterations must be positive")]
    ZeroTotal,
    #[error("poly schedule: step {step} beyond total {total}")]
    StepBeyondTotal { step: usize, total: usize },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
}

/// `base * (1 - step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base: f64, power: f64) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::ZeroTotal);
    }
    if step > total {
        return Err(TrainError::StepBeyondTotal { step, total });
    }
    Ok(base * (1.0 - step as f64 / total as f64).powf(power))
}

pub struct TrainOutcome {
    /// `(step, loss)` for every step taken.
    pub loss_curve: Vec<(usize, f64)>,
    pub final_checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().map(|&(_, l)| l)
    }

    /// Mean loss over the first and last `window` steps, for trend checks.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        if self.loss_curve.len() < window * 2 {
            return None;
        }
        let head: f64 = self.loss_curve[..window].iter().map(|&(_, l)| l).sum();
        let tail: f64 = self.loss_curve[self.loss_curve.len() - window..]
            .iter()
            .map(|&(_, l)| l)
            .sum();
        Some((head / window as f64, tail / window as f64))
    }
}

/// Deterministic batch index stream: a fresh shuffled permutation per epoch,
/// derived from `(seed, epoch)` only. Worker counts cannot change it because
/// there is nothing else to depend on.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> BatchSampler {
        assert!(n > 0 && batch > 0);
        let mut s = BatchSampler {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(self.epoch + 1)));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Loads the training split: synthetic generation or disk tiles per config.
pub fn training_set(cfg: &Config) -> Result<Vec<SegSample>, TrainError> {
    dataset_split(cfg, true)
}

/// Loads the evaluation split (full images; tiling happens at inference).
pub fn eval_set(cfg: &Config) -> Result<Vec<SegSample>, TrainError> {
    dataset_split(cfg, false)
}

fn dataset_split(cfg: &Config, train: bool) -> Result<Vec<SegSample>, TrainError> {
    match cfg.data.kind {
        crate::config::DataKind::Synth => {
            let n = if train { cfg.data.synth_train } else { cfg.data.synth_eval };
            // Disjoint seeds for the two splits.
            let seed = cfg.data.synth_seed + if train { 0 } else { 1 };
            Ok(crate::data::synth_shapes(n, cfg.data.classes, cfg.data.synth_size, seed))
        }
        crate::config::DataKind::Disk => {
            let root = Path::new(&cfg.data.root);
            let manifest = Manifest::load(root)?;
            let split = if train { &cfg.data.train_split } else { &cfg.data.eval_split };
            let samples = load_disk_split(root, split, &manifest, train)?;
            Ok(samples)
        }
    }
}

fn load_disk_split(
    root: &Path,
    split: &str,
    manifest: &Manifest,
    tile: bool,
) -> Result<Vec<SegSample>, DataError> {
    let full = crate::data::load_split(root, split)?;
    if !tile {
        return Ok(full);
    }
    let mut out = Vec::new();
    for s in full {
        out.extend(tile_image(&s.image, &s.mask, manifest.tile, manifest.stride)?);
    }
    Ok(out)
}

/// Runs the configured number of SGD steps on `model`. When `out_dir` is
/// given, writes `resolved.cfg`, `loss_curve.csv` and `model.ckpt` there.
pub fn train(
    model: &SegModel,
    data: &[SegSample],
    cfg: &Config,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let t = &cfg.train;
    let weights = LossWeights::new(cfg.loss.lambda_main, cfg.loss.lambda_aux)?;
    let mut sampler = BatchSampler::new(data.len(), t.batch, t.seed);
    let aug = AugmentParams {
        scale_range: (cfg.augment.scale_min, cfg.augment.scale_max),
        flip_prob: cfg.augment.flip_prob,
        photometric: cfg.augment.photometric,
    };
    let mut curve = Vec::with_capacity(t.iterations);
    for step in 0..t.iterations {
        let idx = sampler.next_batch();
        let refs: Vec<&SegSample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = SegBatch::from_samples(&refs)?;
        let batch = augment(&batch, t.seed ^ (step as u64).wrapping_mul(0x517cc1b727220a95), aug);
        batch.validate(cfg.data.classes)?;

        let tape = Tape::new();
        let out = model.forward(&tape, &batch.images)?;
        let aux_used: Vec<_> = if cfg.loss.aux_all_stages {
            out.aux.clone()
        } else {
            // Deepest-only supervision: just the global pre-classification.
            out.aux.first().cloned().into_iter().collect()
        };
        let loss = total_loss(&out.logits, &aux_used, &batch.masks, weights)?;
        let loss_value = loss.scalar();
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged {
                step,
                loss: loss_value,
            });
        }
        tape.backward(&loss);
        let lr = poly_lr(step, t.iterations, t.lr, t.poly_power)?;
        for (param, var) in out.bindings.pairs() {
            if let Some(grad) = tape.grad(var) {
                param.sgd_step(&grad, lr, t.momentum, t.weight_decay);
            }
        }
        curve.push((step, loss_value));
        if t.log_every > 0 && (step % t.log_every == 0 || step + 1 == t.iterations) {
            progress(step, loss_value, lr);
        }
    }
    let final_checkpoint = Checkpoint::from_model(model, t.iterations as u64);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved.cfg"), cfg.serialize())?;
        let mut csv = String::from("step,loss\n");
        for (s, l) in &curve {
            csv.push_str(&format!("{s},{l}\n"));
        }
        std::fs::write(dir.join("loss_curve.csv"), csv)?;
        final_checkpoint.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome {
        loss_curve: curve,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.01, 0.9).unwrap();
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.005359).abs() < 5e-7);
        assert!(poly_lr(1, 0, 0.01, 0.9).is_err());
        assert!(poly_lr(11, 10, 0.01, 0.9).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epochs() {
        let mut a = BatchSampler::new(10, 4, 7);
        let mut b = BatchSampler::new(10, 4, 7);
        let batches_a: Vec<_> = (0..8).map(|_| a.next_batch()).collect();
        let batches_b: Vec<_> = (0..8).map(|_| b.next_batch()).collect();
        assert_eq!(batches_a, batches_b);
        let mut c = BatchSampler::new(10, 4, 8);
        let batches_c: Vec<_> = (0..8).map(|_| c.next_batch()).collect();
        assert_ne!(batches_a, batches_c);
        // All indices valid.
        assert!(batches_a.iter().flatten().all(|&i| i < 10));
    }

    #[test]
    fn sampler_handles_batch_larger_than_dataset() {
        let mut s = BatchSampler::new(3, 8, 1);
        let b = s.next_batch();
        assert_eq!(b.len(), 8);
        assert!(b.iter().all(|&i| i < 3));
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut cfg = Config::desk();
        cfg.set("encoder.channels", "8,8,16,16").unwrap();
        cfg.set("model.width", "16").unwrap();
        cfg.set("model.heads", "2").unwrap();
        cfg.set("train.iterations", "0").unwrap();
        cfg.set("data.synth_train", "4").unwrap();
        cfg.set("data.synth_size", "32").unwrap();
        cfg.set("data.tile", "32").unwrap();
        let model = SegModel::new(&cfg).unwrap();
        let before: Vec<_> = model.params().iter().map(|p| p.value()).collect();
        let data = training_set(&cfg).unwrap();
        let out = train(&model, &data, &cfg, None, |_, _, _| {}).unwrap();
        assert!(out.loss_curve.is_empty());
        for (b, p) in before.iter().zip(model.params()) {
            let now = p.value();
            assert!(b.iter().zip(now.iter()).all(|(x, y)| x == y));
        }
    }

    #[test]
    fn short_training_is_seed_deterministic() {
        let mut cfg = Config::desk();
        cfg.set("encoder.channels", "8,8,16,16").unwrap();
        cfg.set("model.width", "16").unwrap();
        cfg.set("model.heads", "2").unwrap();
        cfg.set("train.iterations", "3").unwrap();
        cfg.set("train.batch", "2").unwrap();
        cfg.set("data.synth_train", "4").unwrap();
        cfg.set("data.synth_size", "32").unwrap();
        cfg.set("data.tile", "32").unwrap();
        let run = || {
            let model = SegModel::new(&cfg).unwrap();
            let data = training_set(&cfg).unwrap();
            let out = train(&model, &data, &cfg, None, |_, _, _| {}).unwrap();
            (out.loss_curve.clone(), Checkpoint::from_model(&model, 3))
        };
        let (c1, k1) = run();
        let (c2, k2) = run();
        assert_eq!(c1, c2);
        for ((_, a), (_, b)) in k1.params.iter().zip(k2.params.iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
