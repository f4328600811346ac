//! Training a discretized network from scratch, evaluation, and the
//! temporal ablation used to check that a model relies on motion.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::Genotype;
use crate::data::{make_batch, mix_seed, AugmentMode, Dataset, SamplingConfig};
use crate::error::{Error, Result};
use crate::network::{argmax, count_correct, NetworkSpec, NetworkState};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::params::Wrt;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Clips per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            batch_size: 72,
            seed: 0,
            checkpoint_every: 0,
            sampling: SamplingConfig {
                segments: 4,
                per_segment: 2,
                crop: 112,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("train lr, lr_min, momentum and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# epoch lr train_loss train_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{} {:.8} {:.6} {:.6}\n", e.epoch, e.lr, e.loss, e.accuracy));
        }
        s
    }
}

/// Builds the network for `genotype` and trains it from scratch.
pub fn train(
    genotype: &Genotype,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    data: &Dataset,
    checkpoint_dir: Option<&Path>,
    progress: impl FnMut(&EpochStats),
) -> Result<(NetworkState, TrainLog)> {
    let mut state = NetworkState::build(spec, Some(genotype), cfg.seed)?;
    let log = train_state(&mut state, cfg, data, checkpoint_dir, progress)?;
    Ok((state, log))
}

/// SGD with momentum, weight decay and a cosine schedule on `state`.
pub fn train_state(
    state: &mut NetworkState,
    cfg: &TrainConfig,
    data: &Dataset,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if data.classes != state.spec.classes {
        return Err(Error::Config(format!(
            "corpus has {} classes but the network predicts {}",
            data.classes, state.spec.classes
        )));
    }
    let mut sgd = Sgd::new();
    let mut log = TrainLog::default();
    let mut initial = None;
    let all: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        let mut order = all.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, 11), epoch as u64)));
        let stream = mix_seed(mix_seed(cfg.seed, 12), epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(data, chunk, AugmentMode::Train, &cfg.sampling, stream)?;
            let values = state.store.values();
            let out = state.loss_grads(&values, None, &batch.frames, &batch.labels, true, Wrt::PARAMS)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {} at epoch {epoch}, step {step}; lower the learning rate",
                    out.loss
                )));
            }
            let first = *initial.get_or_insert(out.loss);
            if out.loss > 1e3 * first {
                return Err(Error::Diverged(format!(
                    "loss {:.4e} at epoch {epoch}, step {step} exceeds 1000x the initial {first:.4e}; \
                     lower the learning rate",
                    out.loss
                )));
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            state.commit_norm_updates(out.norm_updates);
            sgd.step(
                &mut state.store,
                out.param_grads.as_deref().expect("weight gradient requested"),
                SgdConfig {
                    lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                },
            );
        }
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        progress(&stats);
        log.epochs.push(stats);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch-{:04}.ckpt", epoch + 1));
                state.save(&path)?;
                log.checkpoints.push(path);
            }
        }
    }
    Ok(log)
}

/// Accuracy on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub params: usize,
    pub runtime: Duration,
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.per_class.iter().map(|c| c.1).sum()
    }

    pub fn correct(&self) -> usize {
        self.per_class.iter().map(|c| c.0).sum()
    }

    pub fn top1(&self) -> f64 {
        self.correct() as f64 / self.count() as f64
    }

    /// Accuracy of class `c`; zero for a class with no clips.
    pub fn class_accuracy(&self, c: usize) -> f64 {
        let (k, n) = self.per_class[c];
        if n == 0 {
            0.0
        } else {
            k as f64 / n as f64
        }
    }

    /// Line-based report. Runtime is left out so that reports of identical
    /// runs compare byte for byte.
    pub fn to_text(&self) -> String {
        let mut s = String::from("eval v1\n");
        s.push_str(&format!("clips {}\n", self.count()));
        s.push_str(&format!("params {}\n", self.params));
        s.push_str(&format!("top1 {:.6}\n", self.top1()));
        s.push_str(&format!("loss {:.6}\n", self.loss));
        for (c, (k, n)) in self.per_class.iter().enumerate() {
            s.push_str(&format!("class {c} {k} {n} {:.6}\n", self.class_accuracy(c)));
        }
        s
    }

    /// Reads the `top1` line back from a report file.
    pub fn parse_top1(text: &str) -> Result<f64> {
        text.lines()
            .find_map(|l| l.strip_prefix("top1 "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format("report has no top1 line".into()))
    }
}

/// Evaluates clips `indices` of `data` with center sampling and crop, in
/// inference mode. The network is only read.
pub fn evaluate_indices(
    state: &NetworkState,
    data: &Dataset,
    indices: &[usize],
    sampling: &SamplingConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let start = Instant::now();
    let mut per_class = vec![(0usize, 0usize); data.classes];
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk, AugmentMode::Eval, sampling, 0)?;
        let values = state.store.values();
        let out = state.loss_grads(&values, None, &batch.frames, &batch.labels, false, Wrt::NONE)?;
        loss_sum += out.loss * chunk.len() as f64;
        let k = out.logits.shape().c();
        for (row, &label) in out.logits.data().chunks(k).zip(&batch.labels) {
            per_class[label].1 += 1;
            if argmax(row) == label {
                per_class[label].0 += 1;
            }
        }
    }
    Ok(EvalReport {
        per_class,
        loss: loss_sum / indices.len() as f64,
        params: state.count_params().total,
        runtime: start.elapsed(),
    })
}

/// Evaluates a whole split.
pub fn evaluate(state: &NetworkState, data: &Dataset, sampling: &SamplingConfig, batch_size: usize) -> Result<EvalReport> {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_indices(state, data, &all, sampling, batch_size)
}

/// Accuracy on an already assembled batch, in inference mode.
pub fn batch_accuracy(state: &NetworkState, frames: &crate::Tensor5D, labels: &[usize]) -> Result<f64> {
    let logits = state.logits(frames, false)?;
    Ok(count_correct(&logits, labels) as f64 / labels.len() as f64)
}

/// Replaces every temporal kernel (extent > 1 in time only) by its mean
/// over time, and turns the temporal stage of pooling operators off.
/// Spatial parameters are untouched; applying it twice changes nothing.
pub fn ablate_temporal(state: &NetworkState) -> NetworkState {
    let mut out = state.clone();
    for p in &mut out.store.params {
        let s = p.value.shape();
        let kt = s.t();
        if kt < 2 || s.h() != 1 || s.w() != 1 {
            continue;
        }
        for taps in p.value.data_mut().chunks_mut(kt) {
            if taps.iter().all(|&v| v == taps[0]) {
                continue;
            }
            let mean = taps.iter().sum::<f64>() / kt as f64;
            taps.fill(mean);
        }
    }
    out.temporal_pools = false;
    out
}
