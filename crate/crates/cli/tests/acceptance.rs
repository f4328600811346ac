//! End-to-end acceptance checks. Prints one `criterion N: PASS|FAIL` line
//! per criterion (plus supporting oracle lines) and exits non-zero if any
//! check fails.
//!
//! `STNAS_CRITERIA=1,2,5` restricts the run to the listed criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stnas_core::cell::{connection_count, discretize, enumerate_connections, ArchParams, CellSpec, Genotype};
use stnas_core::data::{center_sample, segment_bounds, segment_sample, Dataset, SamplingConfig, CHANNELS};
use stnas_core::gradcheck::primitive_suite;
use stnas_core::network::{NetworkSpec, NetworkState};
use stnas_core::operators::{OperatorKind, NUM_OPS};
use stnas_core::search::{
    alpha_grad_first_order, alpha_grad_second_order, Bilevel, BilinearToy, NetObjective,
};
use stnas_core::train::evaluate;
use stnas_core::{Shape, Tensor5D};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-300)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suite = primitive_suite(20, 2024).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for e in &suite {
        check(e.cases >= 20, format!("{}: only {} cases", e.name, e.cases))?;
        check(e.worst.rel <= 1e-4, format!("{}: rel {:.3e}", e.name, e.worst.rel))?;
        check(e.worst.grad_norm > 0.0, format!("{}: zero gradient", e.name))?;
        worst = worst.max(e.worst.rel);
    }
    check(suite.iter().any(|e| e.name == "continuous cell"), "continuous cell missing from the suite")?;
    check(elapsed <= Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks x 20 cases, worst rel {worst:.2e}, {:.1}s",
        suite.len(),
        elapsed.as_secs_f64()
    ))
}

fn combinatorics() -> Outcome {
    for n in 1..=8 {
        let formula = (n + 1) * (n + 2) / 2 - 1;
        let listed = enumerate_connections(n).map_err(|e| e.to_string())?.len();
        check(listed == formula && connection_count(n) == formula, format!("n = {n}: {listed} vs {formula}"))?;
    }
    let four = enumerate_connections(4).map_err(|e| e.to_string())?.len();
    check(four == 14, format!("n = 4 gives {four}"))?;
    Ok("n = 1..8 match (n+1)(n+2)/2 - 1; n = 4 gives 14".into())
}

fn random_batch(rng: &mut ChaCha8Rng) -> stnas_core::data::ClipBatch {
    let shape = Shape::new(4, 3, 4, 8, 8);
    let frames = Tensor5D::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    stnas_core::data::ClipBatch {
        frames,
        labels: vec![0, 1, 2, 0],
    }
}

fn bilevel() -> Outcome {
    let spec = NetworkSpec::new(2, 2, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut net = NetworkState::build(&spec, None, 1).map_err(|e| e.to_string())?;
    let rows = spec.connections();
    let values = (0..rows * NUM_OPS).map(|_| rng.gen_range(-0.5..0.5)).collect();
    net.alpha = Some(ArchParams::from_values(rows, values).unwrap());
    let (tb, vb) = (random_batch(&mut rng), random_batch(&mut rng));
    let theta = net.store.flatten();
    let alpha = net.alpha.as_ref().unwrap().values().to_vec();

    // (a)
    let mut obj = NetObjective::new(&net, &tb, &vb);
    let g1 = alpha_grad_first_order(&mut obj, &theta, &alpha).map_err(|e| e.to_string())?;
    let g0 = alpha_grad_second_order(&mut obj, &theta, &alpha, 0.0, 1e-2).map_err(|e| e.to_string())?;
    let ra = rel(&g1, &g0);
    check(ra <= 1e-10, format!("(a) eps = 0 rel {ra:.2e}"))?;

    // (b)
    let mut worst_b = 0.0f64;
    for case in 0..50 {
        let n = rng.gen_range(1..12);
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect() };
        let (a, t, th, al) = (draw(n), draw(n), draw(n), draw(n));
        let eps = [1e-3, 1e-2, 0.1, 0.5][case % 4];
        let mut toy = BilinearToy::new(a.clone(), t.clone());
        let g = alpha_grad_second_order(&mut toy, &th, &al, eps, 1e-2).map_err(|e| e.to_string())?;
        // independent closed form: -eps * a * (theta - eps * a * alpha - t)
        let want: Vec<f64> = (0..n).map(|i| -eps * a[i] * (th[i] - eps * a[i] * al[i] - t[i])).collect();
        worst_b = worst_b.max(rel(&g, &want));
    }
    check(worst_b <= 1e-3, format!("(b) bilinear rel {worst_b:.2e}"))?;

    // (c)
    let reps = 5;
    let mut obj = NetObjective::new(&net, &tb, &vb);
    let t = Instant::now();
    for _ in 0..reps {
        alpha_grad_first_order(&mut obj, &theta, &alpha).map_err(|e| e.to_string())?;
    }
    let first = t.elapsed().as_secs_f64() / reps as f64;
    let first_evals = obj.evaluations() / reps;
    let mut obj = NetObjective::new(&net, &tb, &vb);
    let t = Instant::now();
    for _ in 0..reps {
        alpha_grad_second_order(&mut obj, &theta, &alpha, 0.01, 1e-2).map_err(|e| e.to_string())?;
    }
    let second = t.elapsed().as_secs_f64() / reps as f64;
    let second_evals = obj.evaluations() / reps;
    check(first_evals == 1 && second_evals == 4, format!("(c) {first_evals} vs {second_evals} evaluations"))?;
    // a full step adds one weight-gradient evaluation to either order
    let w = {
        let values = net.store.values();
        let t = Instant::now();
        for _ in 0..reps {
            net.loss_grads(&values, None, &tb.frames, &tb.labels, true, stnas_core::params::Wrt::PARAMS)
                .map_err(|e| e.to_string())?;
        }
        t.elapsed().as_secs_f64() / reps as f64
    };
    Ok(format!(
        "(a) rel {ra:.1e}; (b) worst rel {worst_b:.1e} over 50 cases; (c) evaluations 1 vs 4, \
         architecture-gradient cost ratio first/second {:.2}, full-step ratio {:.2}",
        first / second,
        (first + w) / (second + w)
    ))
}

fn discretization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let shifts = [-10.0, -1.0, -1e-3, 0.5, 2.0, 25.0];
    for case in 0..1000 {
        let n = rng.gen_range(1..=6);
        let spec = CellSpec::new(n, 4).unwrap();
        let scale = [0.01, 1.0, 10.0][case % 3];
        let values: Vec<f64> = (0..spec.connections() * NUM_OPS).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let alpha = ArchParams::from_values(spec.connections(), values.clone()).unwrap();
        let g = discretize(&spec, &alpha).map_err(|e| e.to_string())?;
        check(g.n() == n, format!("case {case}: {} nodes", g.n()))?;
        for (i, edges) in g.nodes.iter().enumerate() {
            check(edges[0].0 != edges[1].0, format!("case {case}: node {i} repeats a source"))?;
            for (src, op) in edges {
                check(src.valid_for(i), format!("case {case}: node {i} reads {src}"))?;
                check(*op != OperatorKind::Zero, format!("case {case}: Zero kept"))?;
            }
        }
        for c in shifts {
            let shifted = ArchParams::from_values(spec.connections(), values.iter().map(|v| v + c).collect()).unwrap();
            let gs = discretize(&spec, &shifted).map_err(|e| e.to_string())?;
            check(gs == g, format!("case {case}: shift {c} changes the genotype"))?;
        }
    }
    Ok(format!("1000 random alpha, 2 edges per node, no Zero; shifts {shifts:?} change nothing"))
}

fn sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for case in 0..10_000 {
        let segments = rng.gen_range(1..8);
        let per = rng.gen_range(1..5);
        let len = segments * per + rng.gen_range(0..40);
        let idx = segment_sample(len, segments, per, &mut rng).map_err(|e| e.to_string())?;
        check(idx.len() == segments * per, format!("case {case}: length {}", idx.len()))?;
        check(idx.windows(2).all(|w| w[0] < w[1]), format!("case {case}: not increasing"))?;
        for s in 0..segments {
            let (lo, hi) = segment_bounds(len, segments, s);
            let inside = idx.iter().filter(|&&i| lo <= i && i < hi).count();
            check(inside == per, format!("case {case}: segment {s} has {inside}"))?;
        }
    }
    let full: Vec<usize> = (0..8).collect();
    for _ in 0..100 {
        check(segment_sample(8, 4, 2, &mut rng).unwrap() == full, "L=8, 4x2 is not the full clip")?;
    }
    check(center_sample(8, 4, 2).unwrap() == full, "centre sampling of L=8, 4x2")?;
    Ok("10^4 random cases; L=8, Ns=4, Nr=2 gives frames 0..7".into())
}

/// Parameter count of a network, enumerated from kernel shapes.
fn param_oracle(spec: &NetworkSpec, g: &Genotype) -> usize {
    let op = |kind: OperatorKind, c: usize| -> usize {
        let taps: &[usize] = match kind {
            OperatorKind::Conv1 => &[1, 1],
            OperatorKind::Conv3 | OperatorKind::DilConv3 => &[9, 3],
            OperatorKind::SpeConv3 => &[3, 3, 3],
            _ => return 0,
        };
        taps.iter().map(|k| k * c * c).sum::<usize>() + 2 * c
    };
    let c0 = spec.init_channels;
    let mut total = 9 * spec.in_channels * c0 + 3 * c0 * c0 + 2 * c0;
    let (mut pp, mut p, mut c) = (c0, c0, c0);
    for i in 0..spec.depth {
        if i > 0 && i % spec.reduce_every == 0 {
            c *= 2;
        }
        total += (pp + p) * c + 4 * c;
        total += g.nodes.iter().flatten().map(|&(_, k)| op(k, c)).sum::<usize>();
        pp = p;
        p = g.n() * c;
    }
    total + spec.classes * (p + 1)
}

fn accounting() -> Outcome {
    let kinds = [
        OperatorKind::SkipCon,
        OperatorKind::Conv1,
        OperatorKind::Conv3,
        OperatorKind::SpeConv3,
        OperatorKind::DilConv3,
        OperatorKind::MPool3,
        OperatorKind::APool3,
    ];
    let mut specs = 0;
    for (depth, c0) in [(1, 4), (2, 4), (3, 8), (6, 8)] {
        for n in [1, 2, 4] {
            let spec = NetworkSpec::new(depth, c0, n, 5);
            let nodes = (0..n)
                .map(|i| {
                    [
                        (stnas_core::cell::Source::PrevPrev, kinds[(2 * i + depth) % kinds.len()]),
                        (stnas_core::cell::Source::from_position(i + 1), kinds[(2 * i + 1 + n) % kinds.len()]),
                    ]
                })
                .collect();
            let g = Genotype::new(nodes).map_err(|e| e.to_string())?;
            let net = NetworkState::build(&spec, Some(&g), 0).map_err(|e| e.to_string())?;
            let (got, want) = (net.count_params().total, param_oracle(&spec, &g));
            check(got == want, format!("depth {depth} c0 {c0} n {n}: {got} vs oracle {want}"))?;
            specs += 1;
        }
    }
    let mut ratios = Vec::new();
    for c in [4, 8, 16] {
        let factorized: usize = OperatorKind::Conv3.conv_shapes(c, c).iter().map(|s| s.numel()).sum::<usize>() + 2 * c;
        let full = 27 * c * c + 2 * c;
        check(factorized < full, format!("C {c}: (2+1)D {factorized} vs 3D {full}"))?;
        ratios.push(format!("C{c} {factorized}/{full}"));
    }
    let spec = NetworkSpec::new(6, 8, 4, 101);
    let g = Genotype::uniform(4, OperatorKind::DilConv3).map_err(|e| e.to_string())?;
    let net = NetworkState::build(&spec, Some(&g), 0).map_err(|e| e.to_string())?;
    let total = net.count_params().total;
    check(total < 3_320_000, format!("large network has {total} parameters"))?;
    check(total == param_oracle(&spec, &g), "large-network count disagrees with the oracle")?;
    Ok(format!(
        "{specs} specs match; Conv_3 (2+1)D vs 3D: {}; depth 6, C0 8, n 4, all DilConv_3, 101 classes: {total} parameters (full-3D counterpart {})",
        ratios.join(", "),
        net.full3d_param_count()
    ))
}

struct DeskRun {
    dir: PathBuf,
    elapsed: Duration,
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stnas(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stnas"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot run stnas: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "stnas {} failed:\n{}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn desk_run(name: &str) -> Result<DeskRun, String> {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    }
    let config = workspace().join("configs/desk.toml");
    let config = config.to_str().unwrap();
    let p = |s: &str| dir.join(s).to_str().unwrap().to_string();
    let start = Instant::now();
    stnas(&["gen", "--config", config, "--out", &p("data")])?;
    stnas(&["search", "--config", config, "--data", &p("data"), "--out", &p("search")])?;
    stnas(&[
        "train",
        "--config",
        config,
        "--data",
        &p("data"),
        "--genotype",
        &p("search/genotype.txt"),
        "--out",
        &p("train"),
    ])?;
    stnas(&[
        "eval",
        "--config",
        config,
        "--data",
        &p("data"),
        "--checkpoint",
        &p("train/final.ckpt"),
        "--out",
        &p("eval"),
    ])?;
    Ok(DeskRun {
        dir,
        elapsed: start.elapsed(),
    })
}

fn summary_value(dir: &Path, key: &str) -> Result<f64, String> {
    let text = fs::read_to_string(dir.join("eval/summary.txt")).map_err(|e| e.to_string())?;
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("summary lacks {key}"))
}

fn desk(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let top1 = summary_value(&run.dir, "top1")?;
    let ablated = summary_value(&run.dir, "ablated_top1")?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    check(minutes <= 45.0, format!("took {minutes:.1} min on {threads} threads"))?;
    check(top1 >= 0.90, format!("test accuracy {:.1}%", 100.0 * top1))?;
    check(ablated <= 1.0 / 3.0 + 0.15, format!("ablated accuracy {:.1}%", 100.0 * ablated))?;
    Ok(format!(
        "test {:.1}%, temporally ablated {:.1}% (bound 48.3%), {minutes:.1} min on {threads} thread(s)",
        100.0 * top1,
        100.0 * ablated
    ))
}

fn search_validation(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let trace = fs::read_to_string(run.dir.join("search/trace.txt")).map_err(|e| e.to_string())?;
    let best = trace
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_whitespace().nth(3)?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    check(best >= 0.8, format!("best search validation accuracy {:.1}%", 100.0 * best))?;
    Ok(format!("best search validation accuracy {:.1}%", 100.0 * best))
}

/// Frames of every direction-class test clip put in random order; the
/// trained model should not tell the directions apart.
fn shuffled_clips(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let state = NetworkState::load(&run.dir.join("train/final.ckpt")).map_err(|e| e.to_string())?;
    let test = Dataset::load(&run.dir.join("data/test.manifest")).map_err(|e| e.to_string())?;
    let config = fs::read_to_string(run.dir.join("eval/config.toml")).map_err(|e| e.to_string())?;
    let sampling = desk_sampling(&config)?;
    let directions: Vec<usize> = (0..test.classes).filter(|&c| test.flip[c] != c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut clips = Vec::new();
    for clip in test.clips.iter().filter(|c| directions.contains(&c.label)) {
        let frame = CHANNELS * clip.height * clip.width;
        for copy in 0..5 {
            let mut order: Vec<usize> = (0..clip.len).collect();
            order.shuffle(&mut rng);
            let mut shuffled = clip.clone();
            shuffled.id = format!("{}-shuffled{copy}", clip.id);
            for (t, &src) in order.iter().enumerate() {
                shuffled.frames[t * frame..(t + 1) * frame].copy_from_slice(&clip.frames[src * frame..(src + 1) * frame]);
            }
            clips.push(shuffled);
        }
    }
    let n = clips.len();
    let shuffled = Dataset { clips, ..test.clone() };
    let intact_idx: Vec<usize> = (0..test.len()).filter(|&i| directions.contains(&test.clips[i].label)).collect();
    let intact = evaluate(&state, &test.subset(&intact_idx), &sampling, 16).map_err(|e| e.to_string())?;
    let report = evaluate(&state, &shuffled, &sampling, 16).map_err(|e| e.to_string())?;
    let chance = 1.0 / directions.len() as f64;
    let acc = report.top1();
    check(acc <= chance + 0.10, format!("shuffled direction clips {:.1}% correct", 100.0 * acc))?;
    Ok(format!(
        "{n} shuffled direction clips: {:.1}% correct (chance {:.0}%, bound {:.0}%); intact {:.1}%",
        100.0 * acc,
        100.0 * chance,
        100.0 * (chance + 0.10),
        100.0 * intact.top1()
    ))
}

fn desk_sampling(config: &str) -> Result<SamplingConfig, String> {
    let section: toml::Table = config.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let s = section.get("sampling").and_then(|v| v.as_table()).ok_or("config lacks [sampling]")?;
    let get = |k: &str| s.get(k).and_then(|v| v.as_integer()).map(|v| v as usize).ok_or(format!("sampling.{k}"));
    Ok(SamplingConfig {
        segments: get("segments")?,
        per_segment: get("per_segment")?,
        crop: get("crop")?,
    })
}

fn artifacts(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut names = vec!["search/genotype.txt".to_string(), "search/search.ckpt".to_string()];
    let mut ckpts: Vec<String> = fs::read_dir(dir.join("train"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ckpt"))
        .map(|n| format!("train/{n}"))
        .collect();
    ckpts.sort();
    names.extend(ckpts);
    names.push("eval/report.txt".into());
    names.push("eval/ablated.txt".into());
    names
        .into_iter()
        .map(|n| fs::read(dir.join(&n)).map(|b| (n.clone(), b)).map_err(|e| format!("{n}: {e}")))
        .collect()
}

fn determinism(first: &Result<DeskRun, String>) -> Outcome {
    let first = first.as_ref().map_err(|e| e.clone())?;
    let second = desk_run("run2")?;
    let (a, b) = (artifacts(&first.dir)?, artifacts(&second.dir)?);
    check(a.len() == b.len(), format!("{} vs {} artifacts", a.len(), b.len()))?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        check(na == nb && ba == bb, format!("{na} differs between runs"))?;
    }
    Ok(format!("{} artifacts bit-identical (genotype, {} checkpoints, eval reports)", a.len(), a.len() - 3))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("STNAS_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |label: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("{label}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("{label}: FAIL ({why})");
            }
        }
    };
    let guarded = |f: &dyn Fn() -> Outcome| -> Outcome {
        panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
    };

    let criteria: [(usize, fn() -> Outcome); 6] = [
        (1, gradients),
        (2, combinatorics),
        (3, bilevel),
        (4, discretization),
        (5, sampling),
        (6, accounting),
    ];
    for (n, f) in criteria {
        if wanted(n) {
            report(&format!("criterion {n}"), guarded(&f));
        }
    }
    if wanted(7) || wanted(8) {
        let run = desk_run("run1");
        if wanted(7) {
            report("criterion 7", guarded(&|| desk(&run)));
            report("  search validation", guarded(&|| search_validation(&run)));
            report("  shuffled clips", guarded(&|| shuffled_clips(&run)));
        }
        if wanted(8) {
            report("criterion 8", guarded(&|| determinism(&run)));
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} check(s) failed");
        ExitCode::FAILURE
    }
}
