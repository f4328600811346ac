//! Central finite-difference check of tape gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NormConfig, RunningStats, Tape, Var};
use crate::cell::{Cell, CellSpec};
use crate::error::Result;
use crate::kernels::{ConvGeom, PoolGeom};
use crate::operators::NUM_OPS;
use crate::params::{Forward, ParamStore};
use crate::tensor::{Shape, Tensor5D};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Outcome of one check over every coordinate of every input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, zero when both
    /// vanish.
    pub rel: f64,
    /// Largest coordinate-wise `|analytic − numeric|`.
    pub max_abs: f64,
    /// `‖analytic‖`, to spot checks that pass only because nothing flows.
    pub grad_norm: f64,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `step`.
///
/// `f` builds its computation on a fresh tape from leaves holding `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor5D], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor5D]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);

    let (mut diff_sq, mut a_sq, mut n_sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut probe: Vec<Tensor5D> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.shape());
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt());
    Ok(GradCheck {
        rel: if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom },
        max_abs,
        grad_norm: a_sq.sqrt(),
    })
}

/// Worst result of a batch of random checks on one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub cases: usize,
    pub worst: GradCheck,
}

/// Reduces an output to a scalar through a fixed random projection, so
/// every output coordinate gets its own upstream gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor5D::uniform(tape.shape(y), 1.0, &mut rng));
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

fn rand_shape<R: Rng>(rng: &mut R) -> Shape {
    Shape::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(2..=4),
        rng.gen_range(3..=5),
        rng.gen_range(3..=5),
    )
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero<R: Rng>(shape: Shape, gap: f64, rng: &mut R) -> Tensor5D {
    let data = (0..shape.numel())
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor5D::from_vec(shape, data).expect("shape")
}

/// A permutation of an evenly spaced grid, so no window holds near-ties.
fn distinct<R: Rng>(shape: Shape, rng: &mut R) -> Tensor5D {
    let n = shape.numel();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    data.shuffle(rng);
    Tensor5D::from_vec(shape, data).expect("shape")
}

fn worst(a: GradCheck, b: GradCheck) -> GradCheck {
    if b.rel > a.rel {
        b
    } else {
        a
    }
}

fn random_conv<R: Rng>(rng: &mut R) -> (Tensor5D, Tensor5D, ConvGeom) {
    let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
    let (cin, cout) = (x.shape().c(), rng.gen_range(1..=3));
    let (k, geom) = match rng.gen_range(0..6) {
        0 => ([1, 3, 3], ConvGeom { pad: [0, 1, 1], ..ConvGeom::unit() }),
        1 => ([3, 1, 1], ConvGeom { pad: [1, 0, 0], ..ConvGeom::unit() }),
        2 => (
            [1, 3, 3],
            ConvGeom {
                pad: [0, 2, 2],
                dilation: [1, 2, 2],
                ..ConvGeom::unit()
            },
        ),
        3 => (
            [1, 3, 3],
            ConvGeom {
                stride: [1, 2, 2],
                pad: [0, 1, 1],
                ..ConvGeom::unit()
            },
        ),
        4 => ([3, 3, 3], ConvGeom { pad: [1, 1, 1], ..ConvGeom::unit() }),
        _ => ([1, 1, 1], ConvGeom::unit()),
    };
    let w = Tensor5D::uniform(Shape::new(cout, cin, k[0], k[1], k[2]), 1.0, rng);
    (x, w, geom)
}

fn random_pool<R: Rng>(rng: &mut R) -> PoolGeom {
    match rng.gen_range(0..4) {
        0 => crate::autodiff::spatial_pool(3, 1, 1),
        1 => crate::autodiff::temporal_pool(3, 1, 1),
        2 => crate::autodiff::spatial_pool(2, 2, 0),
        _ => PoolGeom {
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            pad: [1, 1, 1],
        },
    }
}

/// Random finite-difference checks of every differentiable primitive and
/// of a full continuous cell (inputs, operator weights and α), `cases`
/// each, at step [`STEP`].
pub fn primitive_suite(cases: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    type Case = Box<dyn Fn(&mut ChaCha8Rng, u64) -> Result<GradCheck>>;
    let cfg = NormConfig::default();
    let checks: Vec<(&'static str, Case)> = vec![
        (
            "conv3d",
            Box::new(|rng, s| {
                let (x, w, geom) = random_conv(rng);
                grad_check(
                    move |t, v| {
                        let y = t.conv3d(v[0], v[1], geom)?;
                        project(t, y, s)
                    },
                    &[x, w],
                    STEP,
                )
            }),
        ),
        (
            "relu",
            Box::new(|rng, s| {
                let x = away_from_zero(rand_shape(rng), 1e-3, rng);
                grad_check(|t, v| { let y = t.relu(v[0]); project(t, y, s) }, &[x], STEP)
            }),
        ),
        (
            "batch_norm (training)",
            Box::new(move |rng, s| {
                let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
                let c = x.shape().c();
                let scale = Tensor5D::uniform(Shape::new(1, c, 1, 1, 1), 1.0, rng);
                let shift = Tensor5D::uniform(Shape::new(1, c, 1, 1, 1), 1.0, rng);
                let running = RunningStats::new(c);
                grad_check(
                    move |t, v| {
                        let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, true, cfg)?;
                        project(t, y, s)
                    },
                    &[x, scale, shift],
                    STEP,
                )
            }),
        ),
        (
            "batch_norm (inference)",
            Box::new(move |rng, s| {
                let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
                let c = x.shape().c();
                let scale = Tensor5D::uniform(Shape::new(1, c, 1, 1, 1), 1.0, rng);
                let shift = Tensor5D::uniform(Shape::new(1, c, 1, 1, 1), 1.0, rng);
                let running = RunningStats {
                    mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
                };
                grad_check(
                    move |t, v| {
                        let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, false, cfg)?;
                        project(t, y, s)
                    },
                    &[x, scale, shift],
                    STEP,
                )
            }),
        ),
        (
            "max_pool",
            Box::new(|rng, s| {
                let x = distinct(rand_shape(rng), rng);
                let g = random_pool(rng);
                grad_check(move |t, v| { let y = t.max_pool(v[0], g)?; project(t, y, s) }, &[x], STEP)
            }),
        ),
        (
            "avg_pool",
            Box::new(|rng, s| {
                let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
                let g = random_pool(rng);
                grad_check(move |t, v| { let y = t.avg_pool(v[0], g)?; project(t, y, s) }, &[x], STEP)
            }),
        ),
        (
            "add",
            Box::new(|rng, s| {
                let sh = rand_shape(rng);
                let (a, b) = (Tensor5D::uniform(sh, 1.0, rng), Tensor5D::uniform(sh, 1.0, rng));
                grad_check(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, s) }, &[a, b], STEP)
            }),
        ),
        (
            "mul",
            Box::new(|rng, s| {
                let sh = rand_shape(rng);
                let (a, b) = (Tensor5D::uniform(sh, 1.0, rng), Tensor5D::uniform(sh, 1.0, rng));
                grad_check(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, s) }, &[a, b], STEP)
            }),
        ),
        (
            "scale",
            Box::new(|rng, s| {
                let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
                let k = rng.gen_range(-2.0..2.0);
                grad_check(move |t, v| { let y = t.scale(v[0], k); project(t, y, s) }, &[x], STEP)
            }),
        ),
        (
            "sum",
            Box::new(|rng, _| {
                let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
                grad_check(|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                }, &[x], STEP)
            }),
        ),
        (
            "weighted_sum",
            Box::new(|rng, s| {
                let sh = rand_shape(rng);
                let k = rng.gen_range(2..=4);
                let mut inputs: Vec<Tensor5D> = (0..k).map(|_| Tensor5D::uniform(sh, 1.0, rng)).collect();
                let present: Vec<bool> = (0..k).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
                inputs.push(Tensor5D::uniform(Shape::new(1, k, 1, 1, 1), 1.0, rng));
                grad_check(
                    move |t, v| {
                        let terms: Vec<Option<Var>> =
                            (0..k).map(|i| present[i].then_some(v[i])).collect();
                        let y = t.weighted_sum(&terms, v[k])?;
                        project(t, y, s)
                    },
                    &inputs,
                    STEP,
                )
            }),
        ),
        (
            "concat_channels",
            Box::new(|rng, s| {
                let sh = rand_shape(rng);
                let parts: Vec<Tensor5D> = (0..rng.gen_range(2..=3))
                    .map(|_| Tensor5D::uniform(sh.with_c(rng.gen_range(1..=3)), 1.0, rng))
                    .collect();
                grad_check(|t, v| { let y = t.concat_channels(v)?; project(t, y, s) }, &parts, STEP)
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|rng, s| {
                let x = Tensor5D::uniform(rand_shape(rng), 1.0, rng);
                grad_check(|t, v| { let y = t.global_avg_pool(v[0]); project(t, y, s) }, &[x], STEP)
            }),
        ),
        (
            "linear",
            Box::new(|rng, s| {
                let (n, f, k) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(2..=4));
                let x = Tensor5D::uniform(Shape::new(n, f, 1, 1, 1), 1.0, rng);
                let w = Tensor5D::uniform(Shape::new(k, f, 1, 1, 1), 1.0, rng);
                let b = Tensor5D::uniform(Shape::new(1, k, 1, 1, 1), 1.0, rng);
                grad_check(|t, v| { let y = t.linear(v[0], v[1], v[2])?; project(t, y, s) }, &[x, w, b], STEP)
            }),
        ),
        (
            "softmax",
            Box::new(|rng, s| {
                let x = Tensor5D::uniform(Shape::new(rng.gen_range(1..=3), NUM_OPS, 1, 1, 1), 2.0, rng);
                grad_check(|t, v| { let y = t.softmax(v[0])?; project(t, y, s) }, &[x], STEP)
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng, _| {
                let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
                let x = Tensor5D::uniform(Shape::new(n, k, 1, 1, 1), 3.0, rng);
                let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                grad_check(move |t, v| t.cross_entropy(v[0], &labels), &[x], STEP)
            }),
        ),
        ("continuous cell", Box::new(|rng, s| cell_case(rng, s))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(checks.len());
    for (name, case) in &checks {
        let mut w = GradCheck {
            rel: 0.0,
            max_abs: 0.0,
            grad_norm: f64::INFINITY,
        };
        for _ in 0..cases {
            let s = rng.gen();
            let c = case(&mut rng, s)?;
            w = worst(w, c);
            w.grad_norm = w.grad_norm.min(c.grad_norm);
        }
        out.push(SuiteEntry {
            name,
            cases,
            worst: w,
        });
    }
    Ok(out)
}

/// A continuous cell with every candidate operator, differentiated with
/// respect to its two inputs, all operator parameters and α.
fn cell_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let nodes = rng.gen_range(1..=2);
    let channels = 2;
    let spec = CellSpec::new(nodes, channels)?;
    let m = spec.connections();
    let mut store = ParamStore::new();
    let cell = Cell::continuous(spec, &mut store, "cell", rng)?;
    let shape = Shape::new(2, channels, 3, 4, 4);
    let mut inputs = vec![Tensor5D::uniform(shape, 1.0, rng), Tensor5D::uniform(shape, 1.0, rng)];
    for _ in 0..m {
        inputs.push(Tensor5D::uniform(Shape::new(1, NUM_OPS, 1, 1, 1), 1.0, rng));
    }
    inputs.extend(store.values());
    let store = &store;
    let cell = &cell;
    grad_check(
        move |tape, v| {
            let mut f = Forward::from_leaves(std::mem::take(tape), v[2 + m..].to_vec(), store, true);
            let y = cell.forward(&mut f, Some(&v[2..2 + m]), v[0], v[1])?;
            *tape = f.tape;
            project(tape, y, seed)
        },
        &inputs,
        STEP,
    )
}
