//! Alternating optimization of architecture weights (on validation data)
//! and network weights (on training data).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{discretize, ArchParams, CellSpec, Genotype};
use crate::data::{make_batch, mix_seed, AugmentMode, ClipBatch, Dataset, SamplingConfig};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, NetworkState};
use crate::operators::NUM_OPS;
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::params::Wrt;
use crate::train::evaluate_indices;

/// Which architecture gradient the search uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::First => "first",
            Order::Second => "second",
        })
    }
}

impl FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            _ => Err(Error::Config(format!("order must be \"first\" or \"second\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// Loss and requested gradients at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub theta_grad: Option<Vec<f64>>,
    pub alpha_grad: Option<Vec<f64>>,
}

/// A bilevel problem over flat weight and architecture vectors.
pub trait Bilevel {
    fn evaluate(&mut self, split: Split, theta: &[f64], alpha: &[f64], wrt: Wrt) -> Result<Evaluation>;

    /// Number of `evaluate` calls so far.
    fn evaluations(&self) -> usize;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `∇α L_valid(Θ, α)`: one evaluation, validation split only.
pub fn alpha_grad_first_order<B: Bilevel>(obj: &mut B, theta: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    let e = obj.evaluate(Split::Valid, theta, alpha, Wrt::ALPHA)?;
    Ok(e.alpha_grad.expect("alpha gradient requested"))
}

/// Unrolled gradient `∇α L_valid(Θ′, α) − ε ∇²α,Θ L_train(Θ, α) · v` with
/// `Θ′ = Θ − ε∇Θ L_train` and `v = ∇Θ′ L_valid(Θ′, α)`. The mixed second
/// derivative is a central difference along `v` with step `h = r/‖v‖`.
/// `theta` is only read, so the caller's weights are untouched.
pub fn alpha_grad_second_order<B: Bilevel>(
    obj: &mut B,
    theta: &[f64],
    alpha: &[f64],
    eps: f64,
    r: f64,
) -> Result<Vec<f64>> {
    let train = obj.evaluate(Split::Train, theta, alpha, Wrt::PARAMS)?;
    let gt = train.theta_grad.expect("weight gradient requested");
    let virt: Vec<f64> = theta.iter().zip(&gt).map(|(t, g)| t - eps * g).collect();
    let valid = obj.evaluate(Split::Valid, &virt, alpha, Wrt::BOTH)?;
    let mut grad = valid.alpha_grad.expect("alpha gradient requested");
    let v = valid.theta_grad.expect("weight gradient requested");
    let vn = norm(&v);
    if vn == 0.0 || eps == 0.0 {
        return Ok(grad);
    }
    let h = r / vn;
    let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + h * d).collect();
    let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t - h * d).collect();
    let gp = obj.evaluate(Split::Train, &plus, alpha, Wrt::ALPHA)?.alpha_grad.expect("alpha gradient");
    let gm = obj.evaluate(Split::Train, &minus, alpha, Wrt::ALPHA)?.alpha_grad.expect("alpha gradient");
    for ((g, p), m) in grad.iter_mut().zip(&gp).zip(&gm) {
        *g -= eps * (p - m) / (2.0 * h);
    }
    Ok(grad)
}

/// `α ← α − γ g`.
pub fn alpha_step(alpha: &mut [f64], grad: &[f64], gamma: f64) {
    for (a, g) in alpha.iter_mut().zip(grad) {
        *a -= gamma * g;
    }
}

/// `L_train = Σ θᵢ aᵢ αᵢ`, `L_valid = ½‖θ − t‖²`. The unrolled gradient has
/// the closed form `−ε a ⊙ (θ − ε a ⊙ α − t)`.
#[derive(Clone, Debug)]
pub struct BilinearToy {
    pub a: Vec<f64>,
    pub target: Vec<f64>,
    calls: usize,
}

impl BilinearToy {
    pub fn new(a: Vec<f64>, target: Vec<f64>) -> Self {
        BilinearToy { a, target, calls: 0 }
    }

    pub fn closed_form(&self, theta: &[f64], alpha: &[f64], eps: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let virt = theta[i] - eps * self.a[i] * alpha[i];
                -eps * self.a[i] * (virt - self.target[i])
            })
            .collect()
    }
}

impl Bilevel for BilinearToy {
    fn evaluate(&mut self, split: Split, theta: &[f64], alpha: &[f64], wrt: Wrt) -> Result<Evaluation> {
        self.calls += 1;
        let n = theta.len();
        Ok(match split {
            Split::Train => Evaluation {
                loss: (0..n).map(|i| theta[i] * self.a[i] * alpha[i]).sum(),
                theta_grad: wrt.params.then(|| (0..n).map(|i| self.a[i] * alpha[i]).collect()),
                alpha_grad: wrt.alpha.then(|| (0..n).map(|i| theta[i] * self.a[i]).collect()),
            },
            Split::Valid => Evaluation {
                loss: 0.5 * (0..n).map(|i| (theta[i] - self.target[i]).powi(2)).sum::<f64>(),
                theta_grad: wrt.params.then(|| (0..n).map(|i| theta[i] - self.target[i]).collect()),
                alpha_grad: wrt.alpha.then(|| vec![0.0; n]),
            },
        })
    }

    fn evaluations(&self) -> usize {
        self.calls
    }
}

/// The search network on one (train, valid) batch pair. Every evaluation
/// uses batch statistics and leaves the network's running statistics alone.
pub struct NetObjective<'a> {
    pub net: &'a NetworkState,
    pub train: &'a ClipBatch,
    pub valid: &'a ClipBatch,
    calls: usize,
}

impl<'a> NetObjective<'a> {
    pub fn new(net: &'a NetworkState, train: &'a ClipBatch, valid: &'a ClipBatch) -> Self {
        NetObjective {
            net,
            train,
            valid,
            calls: 0,
        }
    }
}

impl Bilevel for NetObjective<'_> {
    fn evaluate(&mut self, split: Split, theta: &[f64], alpha: &[f64], wrt: Wrt) -> Result<Evaluation> {
        self.calls += 1;
        let batch = match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
        };
        let params = self.net.store.unflatten(theta);
        let arch = ArchParams::from_values(alpha.len() / NUM_OPS, alpha.to_vec())?;
        let out = self
            .net
            .loss_grads(&params, Some(&arch), &batch.frames, &batch.labels, true, wrt)?;
        Ok(Evaluation {
            loss: out.loss,
            theta_grad: out.param_grads.map(|g| crate::params::flatten(&g)),
            alpha_grad: out.alpha_grad,
        })
    }

    fn evaluations(&self) -> usize {
        self.calls
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub weight_lr: f64,
    pub weight_lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    /// Virtual step size; `None` follows the current weight learning rate.
    pub epsilon: Option<f64>,
    pub order: Order,
    pub hvp_r: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training corpus used for architecture steps.
    pub valid_fraction: f64,
    pub sampling: SamplingConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            weight_lr: 0.025,
            weight_lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr: 3e-4,
            epsilon: None,
            order: Order::Second,
            hvp_r: 1e-2,
            batch_size: 16,
            seed: 0,
            valid_fraction: 0.5,
            sampling: SamplingConfig {
                segments: 4,
                per_segment: 2,
                crop: 112,
            },
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("search epochs and batch_size must be positive");
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return bad("search epsilon must be finite and non-negative");
            }
        }
        if !(self.weight_lr >= 0.0 && self.alpha_lr >= 0.0 && self.weight_lr_min >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.hvp_r > 0.0) {
            return bad("hvp_r must be positive");
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return bad("valid_fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }

    /// Virtual step size at a given weight learning rate; zero for the
    /// first-order search.
    pub fn epsilon_at(&self, lr: f64) -> f64 {
        match self.order {
            Order::First => 0.0,
            Order::Second => self.epsilon.unwrap_or(lr),
        }
    }
}

/// One epoch of a search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    /// Row-wise softmax of α, M×8 row-major.
    pub alpha_weights: Vec<f64>,
    pub genotype: Genotype,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    pub records: Vec<SearchRecord>,
    /// Objective evaluations spent on architecture gradients.
    pub alpha_evaluations: usize,
}

impl SearchTrace {
    /// Epoch with the best validation accuracy; ties go to the later epoch.
    pub fn best(&self) -> Option<&SearchRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&SearchRecord>, r| match best {
                Some(b) if b.valid_acc > r.valid_acc => Some(b),
                _ => Some(r),
            })
    }

    /// `epoch train_loss valid_loss valid_acc genotype_hash` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# epoch train_loss valid_loss valid_acc genotype_hash\n");
        for r in &self.records {
            s.push_str(&format!(
                "{} {:.6} {:.6} {:.6} {}\n",
                r.epoch,
                r.train_loss,
                r.valid_loss,
                r.valid_acc,
                r.genotype.hash_hex()
            ));
        }
        s
    }

    /// One `alpha <epoch>` block of softmax weights per epoch.
    pub fn alpha_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("alpha {}\n", r.epoch));
            for row in r.alpha_weights.chunks(NUM_OPS) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                s.push_str(&cells.join(" "));
                s.push('\n');
            }
        }
        s
    }
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub trace: SearchTrace,
    /// The continuous network after the last epoch.
    pub state: NetworkState,
}

/// Stratified split into (train, valid) index lists.
pub fn split_indices(data: &Dataset, valid_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5911));
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for class in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.clips[i].label == class).collect();
        idx.shuffle(&mut rng);
        let nv = (idx.len() as f64 * valid_fraction).round() as usize;
        valid.extend_from_slice(&idx[..nv]);
        train.extend_from_slice(&idx[nv..]);
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config(format!(
            "a {} / {} search split of {} clips leaves one side empty",
            1.0 - valid_fraction,
            valid_fraction,
            data.len()
        )));
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

fn epoch_order(idx: &[usize], seed: u64, epoch: usize, tag: u64) -> Vec<usize> {
    let mut order = idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, tag), epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Runs the alternating search from a freshly built continuous network.
/// `progress` sees every finished epoch.
pub fn search(
    cfg: &SearchConfig,
    spec: &NetworkSpec,
    data: &Dataset,
    mut progress: impl FnMut(&SearchRecord),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.classes != spec.classes {
        return Err(Error::Config(format!(
            "corpus has {} classes but the network predicts {}",
            data.classes, spec.classes
        )));
    }
    let (train_idx, valid_idx) = split_indices(data, cfg.valid_fraction, cfg.seed)?;
    let mut state = NetworkState::build(spec, None, cfg.seed)?;
    let cell_spec = CellSpec::new(spec.nodes, spec.init_channels)?;
    let mut sgd = Sgd::new();
    let mut trace = SearchTrace::default();
    let b = cfg.batch_size;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.weight_lr, cfg.weight_lr_min, epoch, cfg.epochs);
        let eps = cfg.epsilon_at(lr);
        let train_order = epoch_order(&train_idx, cfg.seed, epoch, 1);
        let valid_order = epoch_order(&valid_idx, cfg.seed, epoch, 2);
        let train_stream = mix_seed(mix_seed(cfg.seed, 3), epoch as u64);
        let valid_stream = mix_seed(mix_seed(cfg.seed, 4), epoch as u64);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, chunk) in train_order.chunks(b).enumerate() {
            let vb: Vec<usize> = (0..chunk.len())
                .map(|k| valid_order[(step * b + k) % valid_order.len()])
                .collect();
            let train_batch = make_batch(data, chunk, AugmentMode::Train, &cfg.sampling, train_stream)?;
            let valid_batch = make_batch(data, &vb, AugmentMode::Train, &cfg.sampling, valid_stream)?;

            let theta = state.store.flatten();
            let mut alpha = state.alpha.as_ref().expect("continuous network").values().to_vec();
            let grad = {
                let mut obj = NetObjective::new(&state, &train_batch, &valid_batch);
                let g = match cfg.order {
                    Order::First => alpha_grad_first_order(&mut obj, &theta, &alpha)?,
                    Order::Second => alpha_grad_second_order(&mut obj, &theta, &alpha, eps, cfg.hvp_r)?,
                };
                trace.alpha_evaluations += obj.evaluations();
                g
            };
            alpha_step(&mut alpha, &grad, cfg.alpha_lr);
            let arch = ArchParams::from_values(alpha.len() / NUM_OPS, alpha).map_err(|_| {
                Error::NonFinite(format!("architecture weights became non-finite at epoch {epoch}, step {step}"))
            })?;
            state.alpha = Some(arch);

            let values = state.store.values();
            let out = state.loss_grads(
                &values,
                None,
                &train_batch.frames,
                &train_batch.labels,
                true,
                Wrt::PARAMS,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {} at epoch {epoch}, step {step}; lower weight_lr",
                    out.loss
                )));
            }
            loss_sum += out.loss * chunk.len() as f64;
            seen += chunk.len();
            state.commit_norm_updates(out.norm_updates);
            let grads = out.param_grads.expect("weight gradient requested");
            sgd.step(
                &mut state.store,
                &grads,
                SgdConfig {
                    lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                },
            );
        }
        let valid = evaluate_indices(&state, data, &valid_idx, &cfg.sampling, b)?;
        let alpha = state.alpha.as_ref().expect("continuous network");
        let record = SearchRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            valid_loss: valid.loss,
            valid_acc: valid.correct() as f64 / valid.count() as f64,
            alpha_weights: alpha.weights(),
            genotype: discretize(&cell_spec, alpha)?,
        };
        progress(&record);
        trace.records.push(record);
    }
    let genotype = trace.best().expect("at least one epoch").genotype.clone();
    Ok(SearchOutcome { genotype, trace, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_parses() {
        assert_eq!("first".parse::<Order>().unwrap(), Order::First);
        assert_eq!(Order::Second.to_string(), "second");
        assert!(matches!("third".parse::<Order>(), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_step_is_plain_descent() {
        let mut a = vec![1.0, -2.0];
        alpha_step(&mut a, &[0.5, 0.5], 0.0);
        assert_eq!(a, vec![1.0, -2.0]);
        // L = ½α² from α = 1 with γ = 0.1
        let mut a = vec![1.0];
        let g = a.clone();
        alpha_step(&mut a, &g, 0.1);
        assert!((a[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn bilinear_second_order_matches_closed_form() {
        let mut toy = BilinearToy::new(vec![0.5, -1.5, 2.0], vec![0.3, 0.1, -0.7]);
        let theta = [0.2, -0.4, 1.1];
        let alpha = [1.0, 0.5, -0.25];
        let g = alpha_grad_second_order(&mut toy, &theta, &alpha, 0.1, 1e-2).unwrap();
        let want = toy.closed_form(&theta, &alpha, 0.1);
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        assert_eq!(toy.evaluations(), 4);
    }

    #[test]
    fn best_epoch_prefers_later_ties() {
        let g = Genotype::uniform(1, crate::operators::OperatorKind::SkipCon).unwrap();
        let rec = |epoch, acc| SearchRecord {
            epoch,
            train_loss: 0.0,
            valid_loss: 0.0,
            valid_acc: acc,
            alpha_weights: vec![],
            genotype: g.clone(),
        };
        let trace = SearchTrace {
            records: vec![rec(0, 0.5), rec(1, 0.75), rec(2, 0.75), rec(3, 0.25)],
            alpha_evaluations: 0,
        };
        assert_eq!(trace.best().unwrap().epoch, 2);
    }
}
