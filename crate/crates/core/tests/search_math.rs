use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stnas_core::cell::ArchParams;
use stnas_core::data::{ClipBatch, CorpusKind, SamplingConfig, SynthConfig};
use stnas_core::network::{NetworkSpec, NetworkState};
use stnas_core::operators::NUM_OPS;
use stnas_core::optim::{Sgd, SgdConfig};
use stnas_core::params::Wrt;
use stnas_core::search::{
    alpha_grad_first_order, alpha_grad_second_order, alpha_step, search, Bilevel, BilinearToy,
    NetObjective, Order, SearchConfig, Split,
};
use stnas_core::{Shape, Tensor5D};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-300)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, t: usize, hw: usize, classes: usize) -> ClipBatch {
    let shape = Shape::new(n, 3, t, hw, hw);
    let frames = Tensor5D::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let labels = (0..n).map(|i| i % classes).collect();
    ClipBatch { frames, labels }
}

/// Tiny continuous network with random architecture weights.
fn toy_network(seed: u64) -> NetworkState {
    let spec = NetworkSpec::new(2, 2, 2, 3);
    let mut net = NetworkState::build(&spec, None, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1);
    let rows = spec.connections();
    let values = (0..rows * NUM_OPS).map(|_| rng.gen_range(-0.5..0.5)).collect();
    net.alpha = Some(ArchParams::from_values(rows, values).unwrap());
    net
}

fn batches(seed: u64) -> (ClipBatch, ClipBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (random_batch(&mut rng, 4, 4, 8, 3), random_batch(&mut rng, 4, 4, 8, 3))
}

#[test]
fn zero_epsilon_reduces_to_first_order() {
    for seed in 0..3 {
        let net = toy_network(seed);
        let (tb, vb) = batches(seed + 100);
        let theta = net.store.flatten();
        let alpha = net.alpha.as_ref().unwrap().values().to_vec();
        let mut obj = NetObjective::new(&net, &tb, &vb);
        let g1 = alpha_grad_first_order(&mut obj, &theta, &alpha).unwrap();
        let g2 = alpha_grad_second_order(&mut obj, &theta, &alpha, 0.0, 1e-2).unwrap();
        assert!(norm(&g1) > 0.0);
        let r = rel(&g1, &g2);
        assert!(r <= 1e-10, "seed {seed}: rel {r:e}");
    }
}

#[test]
fn bilinear_unrolled_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..50 {
        let n = rng.gen_range(1..12);
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect() };
        let (a, target, theta, alpha) = (draw(n), draw(n), draw(n), draw(n));
        let eps = [1e-3, 1e-2, 0.1, 0.5][case % 4];
        let mut toy = BilinearToy::new(a, target);
        let g = alpha_grad_second_order(&mut toy, &theta, &alpha, eps, 1e-2).unwrap();
        let want = toy.closed_form(&theta, &alpha, eps);
        let r = rel(&g, &want);
        assert!(r <= 1e-3, "case {case}: rel {r:e}");
    }
}

#[test]
fn evaluation_counts_and_cost() {
    let net = toy_network(5);
    let (tb, vb) = batches(105);
    let theta = net.store.flatten();
    let alpha = net.alpha.as_ref().unwrap().values().to_vec();

    let mut obj = NetObjective::new(&net, &tb, &vb);
    let t = Instant::now();
    alpha_grad_first_order(&mut obj, &theta, &alpha).unwrap();
    let first = t.elapsed();
    assert_eq!(obj.evaluations(), 1);

    let mut obj = NetObjective::new(&net, &tb, &vb);
    let t = Instant::now();
    alpha_grad_second_order(&mut obj, &theta, &alpha, 0.01, 1e-2).unwrap();
    let second = t.elapsed();
    assert_eq!(obj.evaluations(), 4);
    println!(
        "architecture gradient cost: first order {first:?}, second order {second:?}, ratio {:.2}",
        second.as_secs_f64() / first.as_secs_f64()
    );

    let mut toy = BilinearToy::new(vec![1.0; 3], vec![0.0; 3]);
    alpha_grad_first_order(&mut toy, &[1.0; 3], &[1.0; 3]).unwrap();
    assert_eq!(toy.evaluations(), 1);
}

#[test]
fn second_order_leaves_weights_untouched() {
    let net = toy_network(6);
    let before = net.clone();
    let (tb, vb) = batches(106);
    let theta = net.store.flatten();
    let alpha = net.alpha.as_ref().unwrap().values().to_vec();
    let mut obj = NetObjective::new(&net, &tb, &vb);
    alpha_grad_second_order(&mut obj, &theta, &alpha, 0.05, 1e-2).unwrap();
    assert_eq!(theta, before.store.flatten());
    assert_eq!(net.store, before.store);
    assert_eq!(net.alpha, before.alpha);
}

#[test]
fn unrolled_gradient_approaches_first_order_as_epsilon_shrinks() {
    let net = toy_network(7);
    let (tb, vb) = batches(107);
    let theta = net.store.flatten();
    let alpha = net.alpha.as_ref().unwrap().values().to_vec();
    let mut obj = NetObjective::new(&net, &tb, &vb);
    let g1 = alpha_grad_first_order(&mut obj, &theta, &alpha).unwrap();
    let gaps: Vec<f64> = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&eps| rel(&alpha_grad_second_order(&mut obj, &theta, &alpha, eps, 1e-2).unwrap(), &g1))
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps {gaps:?}");
    assert!(gaps[0] > 0.0);
}

#[test]
fn architecture_gradient_matches_finite_differences() {
    let net = toy_network(8);
    let (tb, _) = batches(108);
    let params = net.store.values();
    let arch = net.alpha.clone().unwrap();
    let loss_at = |a: &ArchParams| {
        net.loss_grads(&params, Some(a), &tb.frames, &tb.labels, true, Wrt::NONE)
            .unwrap()
            .loss
    };
    let analytic = net
        .loss_grads(&params, Some(&arch), &tb.frames, &tb.labels, true, Wrt::ALPHA)
        .unwrap()
        .alpha_grad
        .unwrap();
    let h = 1e-5;
    let numeric: Vec<f64> = (0..arch.values().len())
        .map(|i| {
            let (mut p, mut m) = (arch.clone(), arch.clone());
            p.values_mut()[i] += h;
            m.values_mut()[i] -= h;
            (loss_at(&p) - loss_at(&m)) / (2.0 * h)
        })
        .collect();
    let r = rel(&analytic, &numeric);
    assert!(r <= 1e-4, "rel {r:e}");
    assert!(norm(&analytic) > 0.0);
}

#[test]
fn architecture_steps_descend_with_frozen_weights() {
    let net = toy_network(9);
    let (tb, vb) = batches(109);
    let theta = net.store.flatten();
    let mut alpha = net.alpha.as_ref().unwrap().values().to_vec();
    let mut obj = NetObjective::new(&net, &tb, &vb);
    let mut last = obj.evaluate(Split::Valid, &theta, &alpha, Wrt::NONE).unwrap().loss;
    for _ in 0..5 {
        let g = alpha_grad_first_order(&mut obj, &theta, &alpha).unwrap();
        alpha_step(&mut alpha, &g, 0.05);
        let now = obj.evaluate(Split::Valid, &theta, &alpha, Wrt::NONE).unwrap().loss;
        assert!(now < last, "{now} >= {last}");
        last = now;
    }
}

#[test]
fn weight_steps_overfit_a_fixed_batch() {
    let mut net = toy_network(10);
    let (tb, _) = batches(110);
    let mut sgd = Sgd::new();
    let cfg = SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..60 {
        let values = net.store.values();
        let out = net
            .loss_grads(&values, None, &tb.frames, &tb.labels, true, Wrt::PARAMS)
            .unwrap();
        first.get_or_insert(out.loss);
        last = out.loss;
        sgd.step(&mut net.store, &out.param_grads.unwrap(), cfg);
    }
    let first = first.unwrap();
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

fn tiny_corpus(kind: CorpusKind, seed: u64) -> stnas_core::data::Dataset {
    let cfg = SynthConfig {
        kind,
        clips_per_class: 6,
        frames: 8,
        height: 16,
        width: 16,
        shape_size: 4,
        test_fraction: 0.0,
        seed,
        ..Default::default()
    };
    stnas_core::data::synth_corpus(&cfg).unwrap().train
}

fn tiny_search_config() -> SearchConfig {
    SearchConfig {
        epochs: 2,
        batch_size: 6,
        order: Order::Second,
        sampling: SamplingConfig {
            segments: 2,
            per_segment: 2,
            crop: 12,
        },
        ..Default::default()
    }
}

#[test]
fn frozen_architecture_search_only_moves_weights() {
    let data = tiny_corpus(CorpusKind::Motion, 1);
    let spec = NetworkSpec::new(2, 2, 2, 3);
    let cfg = SearchConfig {
        alpha_lr: 0.0,
        ..tiny_search_config()
    };
    let out = search(&cfg, &spec, &data, |_| {}).unwrap();
    assert!(out.state.alpha.as_ref().unwrap().values().iter().all(|&v| v == 0.0));
    let fresh = NetworkState::build(&spec, None, cfg.seed).unwrap();
    assert_ne!(fresh.store.flatten(), out.state.store.flatten());
}

#[test]
fn frozen_weight_search_only_moves_architecture() {
    let data = tiny_corpus(CorpusKind::Motion, 2);
    let spec = NetworkSpec::new(2, 2, 2, 3);
    let cfg = SearchConfig {
        weight_lr: 0.0,
        alpha_lr: 0.01,
        epsilon: Some(0.01),
        ..tiny_search_config()
    };
    let out = search(&cfg, &spec, &data, |_| {}).unwrap();
    let fresh = NetworkState::build(&spec, None, cfg.seed).unwrap();
    assert_eq!(fresh.store.flatten(), out.state.store.flatten());
    // only running statistics moved
    assert_ne!(fresh.store.norms, out.state.store.norms);
    assert!(out.state.alpha.as_ref().unwrap().values().iter().any(|&v| v != 0.0));
    assert_eq!(out.trace.records.len(), 2);
    // 18 clips, half for architecture steps: 9 train clips in 2 batches of 4 evaluations
    assert_eq!(out.trace.alpha_evaluations, 2 * 2 * 4);
}

#[test]
fn search_is_reproducible() {
    let data = tiny_corpus(CorpusKind::Motion, 3);
    let spec = NetworkSpec::new(2, 2, 2, 3);
    let cfg = SearchConfig {
        order: Order::First,
        alpha_lr: 0.01,
        ..tiny_search_config()
    };
    let a = search(&cfg, &spec, &data, |_| {}).unwrap();
    let b = search(&cfg, &spec, &data, |_| {}).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.state.store, b.state.store);
}

/// One mixed edge regressing its own input, so Skip_Con is exactly right
/// and every other candidate loses something (ReLU, blur, zeros).
struct IdentityEdge {
    store: stnas_core::params::ParamStore,
    ops: Vec<stnas_core::operators::OperatorInstance>,
    train: Tensor5D,
    valid: Tensor5D,
    calls: usize,
}

impl IdentityEdge {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = stnas_core::params::ParamStore::new();
        let ops = stnas_core::operators::candidate_set(2, &mut store, "edge", &mut rng).unwrap();
        let shape = Shape::new(4, 2, 4, 6, 6);
        let mut draw = || Tensor5D::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (train, valid) = (draw(), draw());
        IdentityEdge {
            store,
            ops,
            train,
            valid,
            calls: 0,
        }
    }
}

impl Bilevel for IdentityEdge {
    fn evaluate(&mut self, split: Split, theta: &[f64], alpha: &[f64], wrt: Wrt) -> stnas_core::Result<stnas_core::search::Evaluation> {
        self.calls += 1;
        let x = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        };
        let values = self.store.unflatten(theta);
        let mut f = stnas_core::params::Forward::new(&self.store, &values, true, wrt.params);
        let a = f.tape.leaf(Tensor5D::vector(alpha.to_vec()), wrt.alpha);
        let xv = f.tape.constant(x.clone());
        let out = stnas_core::operators::mixed_op(&mut f, xv, a, &self.ops)?;
        let neg = f.tape.constant(x.map(|v| -v));
        let diff = f.tape.add(out, neg)?;
        let sq = f.tape.mul(diff, diff)?;
        let total = f.tape.sum(sq);
        let loss = f.tape.scale(total, 0.5 / x.len() as f64);
        let value = f.tape.value(loss).item();
        let mut grads = f.tape.backward(loss);
        let theta_grad = wrt.params.then(|| {
            let parts: Vec<Tensor5D> = f
                .param_vars()
                .iter()
                .zip(&values)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor5D::zeros(p.shape())))
                .collect();
            stnas_core::params::flatten(&parts)
        });
        let alpha_grad = wrt.alpha.then(|| grads.take(a).unwrap().into_data());
        Ok(stnas_core::search::Evaluation {
            loss: value,
            theta_grad,
            alpha_grad,
        })
    }

    fn evaluations(&self) -> usize {
        self.calls
    }
}

#[test]
fn search_finds_a_planted_skip_connection() {
    for order in [Order::First, Order::Second] {
        let mut edge = IdentityEdge::new(31);
        let mut theta = edge.store.flatten();
        let mut alpha = vec![0.0; NUM_OPS];
        let mut sgd = Sgd::new();
        let lr = 0.05;
        for _ in 0..600 {
            let g = match order {
                Order::First => alpha_grad_first_order(&mut edge, &theta, &alpha).unwrap(),
                Order::Second => alpha_grad_second_order(&mut edge, &theta, &alpha, lr, 1e-2).unwrap(),
            };
            alpha_step(&mut alpha, &g, 0.5);
            let e = edge.evaluate(Split::Train, &theta, &alpha, Wrt::PARAMS).unwrap();
            edge.store.set_flat(&theta);
            let grads = edge.store.unflatten(&e.theta_grad.unwrap());
            let cfg = SgdConfig {
                lr,
                momentum: 0.9,
                weight_decay: 3e-4,
            };
            sgd.step(&mut edge.store, &grads, cfg);
            theta = edge.store.flatten();
        }
        let arch = ArchParams::from_values(1, alpha).unwrap();
        let w = arch.weights();
        let conv_mass: f64 = stnas_core::operators::OperatorKind::ALL
            .iter()
            .filter(|k| k.is_parametric())
            .map(|k| w[k.index()])
            .sum();
        let best = stnas_core::cell::best_operator(arch.row(0));
        println!("{order}: weights {w:.3?}");
        assert_eq!(best, stnas_core::operators::OperatorKind::SkipCon, "{order}");
        assert!(conv_mass < 0.2, "{order}: parametric mass {conv_mass}");
    }
}
