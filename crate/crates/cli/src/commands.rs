use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use stnas_core::cell::Genotype;
use stnas_core::data::{synth_corpus, write_corpus, Dataset};
use stnas_core::network::NetworkState;
use stnas_core::search::search as run_search;
use stnas_core::train::{ablate_temporal, evaluate, train as run_train};

use crate::config::{OrderName, RunConfig};
use crate::{Common, EvalArgs, GenArgs, NetArgs, ParamsArgs, SearchArgs, TableArgs, TrainArgs};

/// Caps rayon's pool at `STNAS_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("STNAS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("STNAS_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot configure the thread pool")
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| anyhow!("--out is required: name a fresh run directory"))
}

/// Creates the run directory, refusing to reuse a non-empty one unless
/// forced.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let used = fs::read_dir(dir)
            .with_context(|| format!("cannot read {}", dir.display()))?
            .next()
            .is_some();
        if used && !force {
            bail!(
                "output directory {} already exists; choose a new --out or pass --force",
                dir.display()
            );
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Progress lines go to stderr and to `run.log` in the run directory.
struct RunLog {
    file: fs::File,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("run.log");
        let file = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(RunLog { file })
    }

    fn line(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        eprintln!("{msg}");
        let _ = writeln!(self.file, "{msg}");
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes the resolved configuration next to the run's outputs and logs it.
fn start_run(dir: &Path, force: bool, cfg: &RunConfig, command: &str) -> Result<RunLog> {
    prepare_dir(dir, force)?;
    let resolved = cfg.to_toml();
    write(&dir.join("config.toml"), &resolved)?;
    let mut log = RunLog::open(dir)?;
    log.line(format!("stnas {command} -> {}", dir.display()));
    for l in resolved.lines() {
        log.line(format!("  {l}"));
    }
    Ok(log)
}

fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(name);
    if !path.exists() {
        bail!(
            "{} not found; generate a corpus with `stnas gen --out {}` or point --data at one",
            path.display(),
            dir.display()
        );
    }
    Dataset::load(&path).with_context(|| format!("cannot load {}", path.display()))
}

fn load_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read genotype {}", path.display()))?;
    Genotype::parse(&text).with_context(|| format!("malformed genotype file {}", path.display()))
}

fn apply_net(net: &NetArgs, epochs: &mut usize, depth: &mut usize, channels: &mut usize) {
    if let Some(v) = net.epochs {
        *epochs = v;
    }
    if let Some(v) = net.depth {
        *depth = v;
    }
    if let Some(v) = net.channels {
        *channels = v;
    }
}

pub fn gen(args: GenArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let dir = args.common.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let mut log = start_run(&dir, args.common.force, &cfg, "gen")?;
    let corpus = synth_corpus(&cfg.synth())?;
    let files = write_corpus(&corpus, &dir)?;
    log.line(format!(
        "wrote {} clips ({} train, {} test) and manifests {}, {}",
        files.clips,
        corpus.train.len(),
        corpus.test.len(),
        files.train_manifest.display(),
        files.test_manifest.display()
    ));
    Ok(())
}

pub fn search(args: SearchArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let s = &mut cfg.search;
    apply_net(&args.net, &mut s.epochs, &mut s.depth, &mut s.init_channels);
    if let Some(n) = args.nodes {
        s.nodes = n;
    }
    if let Some(o) = &args.order {
        s.order = if o == "first" { OrderName::First } else { OrderName::Second };
    }
    if let Some(d) = &args.data {
        cfg.data.dir = d.clone();
    }
    let dir = require_out(&args.common)?;
    let data = load_split(&cfg.data.dir, "train.manifest")?;
    let mut log = start_run(&dir, args.common.force, &cfg, "search")?;
    let spec = cfg.search_spec(data.classes);
    let start = Instant::now();
    let outcome = run_search(&cfg.search_config(), &spec, &data, |r| {
        log.line(format!(
            "epoch {} train_loss {:.4} valid_loss {:.4} valid_acc {:.4} genotype {} [{:.0}s]",
            r.epoch,
            r.train_loss,
            r.valid_loss,
            r.valid_acc,
            r.genotype.hash_hex(),
            start.elapsed().as_secs_f64()
        ));
    })?;
    let best = outcome.trace.best().expect("search ran at least one epoch");
    write(&dir.join("genotype.txt"), &outcome.genotype.to_text())?;
    write(&dir.join("trace.txt"), &outcome.trace.to_text())?;
    write(&dir.join("alpha.txt"), &outcome.trace.alpha_text())?;
    outcome.state.save(&dir.join("search.ckpt"))?;
    log.line(format!(
        "best epoch {} valid_acc {:.4}; {} architecture-gradient evaluations",
        best.epoch, best.valid_acc, outcome.trace.alpha_evaluations
    ));
    log.line(format!("genotype {}:\n{}", outcome.genotype.hash_hex(), outcome.genotype.to_text().trim_end()));
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let t = &mut cfg.train;
    apply_net(&args.net, &mut t.epochs, &mut t.depth, &mut t.init_channels);
    if let Some(d) = &args.data {
        cfg.data.dir = d.clone();
    }
    let dir = require_out(&args.common)?;
    let genotype = load_genotype(&args.genotype)?;
    let data = load_split(&cfg.data.dir, "train.manifest")?;
    let mut log = start_run(&dir, args.common.force, &cfg, "train")?;
    let spec = cfg.train_spec(genotype.n(), data.classes);
    let start = Instant::now();
    let (state, curve) = run_train(&genotype, &spec, &cfg.train_config(), &data, Some(&dir), |e| {
        log.line(format!(
            "epoch {} lr {:.6} loss {:.4} train_acc {:.4} [{:.0}s]",
            e.epoch,
            e.lr,
            e.loss,
            e.accuracy,
            start.elapsed().as_secs_f64()
        ));
    })?;
    write(&dir.join("genotype.txt"), &genotype.to_text())?;
    write(&dir.join("loss.txt"), &curve.to_text())?;
    state.save(&dir.join("final.ckpt"))?;
    log.line(format!(
        "trained {} parameters; checkpoint {}",
        state.count_params().total,
        dir.join("final.ckpt").display()
    ));
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.data.dir = d.clone();
    }
    let dir = require_out(&args.common)?;
    let state = NetworkState::load(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let data = load_split(&cfg.data.dir, "test.manifest")?;
    if data.classes != state.spec.classes {
        bail!(
            "checkpoint predicts {} classes but the corpus in {} has {}",
            state.spec.classes,
            cfg.data.dir.display(),
            data.classes
        );
    }
    let mut log = start_run(&dir, args.common.force, &cfg, "eval")?;
    let sampling = cfg.sampling();
    let report = evaluate(&state, &data, &sampling, cfg.eval.batch_size)?;
    let ablated = evaluate(&ablate_temporal(&state), &data, &sampling, cfg.eval.batch_size)?;
    write(&dir.join("report.txt"), &report.to_text())?;
    write(&dir.join("ablated.txt"), &ablated.to_text())?;
    let genotype = state.genotype.as_ref().map_or("continuous".to_string(), |g| g.hash_hex());
    let summary = format!(
        "checkpoint {}\ngenotype {}\nparams {}\nfull3d_params {}\ntop1 {:.6}\nablated_top1 {:.6}\n",
        args.checkpoint.display(),
        genotype,
        report.params,
        state.full3d_param_count(),
        report.top1(),
        ablated.top1()
    );
    write(&dir.join("summary.txt"), &summary)?;
    log.line(format!(
        "top1 {:.4} on {} clips ({:.2}s); temporally ablated top1 {:.4}",
        report.top1(),
        report.count(),
        report.runtime.as_secs_f64(),
        ablated.top1()
    ));
    Ok(())
}

/// Left-aligned first column, right-aligned others.
fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for r in rows {
        s.push_str(&line(r));
    }
    s
}

pub fn params(args: ParamsArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let t = &mut cfg.train;
    apply_net(&args.net, &mut t.epochs, &mut t.depth, &mut t.init_channels);
    let genotype = load_genotype(&args.genotype)?;
    let classes = args.classes.unwrap_or(cfg.data.classes);
    let spec = cfg.train_spec(genotype.n(), classes);
    let state = NetworkState::build(&spec, Some(&genotype), cfg.seed)?;
    let counts = state.count_params();
    let mut rows: Vec<Vec<String>> = counts
        .layers
        .iter()
        .map(|l| {
            vec![
                l.layer.clone(),
                l.conv.to_string(),
                l.adapt.to_string(),
                l.norm.to_string(),
                l.linear.to_string(),
                l.total().to_string(),
            ]
        })
        .collect();
    let sum = |f: fn(&stnas_core::network::LayerCount) -> usize| counts.layers.iter().map(f).sum::<usize>().to_string();
    rows.push(vec![
        "total".into(),
        sum(|l| l.conv),
        sum(|l| l.adapt),
        sum(|l| l.norm),
        sum(|l| l.linear),
        counts.total.to_string(),
    ]);
    let mut text = format!(
        "genotype {} depth {} channels {} nodes {} classes {}\n",
        genotype.hash_hex(),
        spec.depth,
        spec.init_channels,
        spec.nodes,
        spec.classes
    );
    text.push_str(&render_table(&["layer", "conv", "adapt", "norm", "linear", "total"], &rows));
    text.push_str(&format!("full-3D counterpart {}\n", state.full3d_param_count()));
    print!("{text}");
    if let Some(dir) = &args.common.out {
        let mut log = start_run(dir, args.common.force, &cfg, "params")?;
        write(&dir.join("params.txt"), &text)?;
        log.line(format!("wrote {}", dir.join("params.txt").display()));
    }
    Ok(())
}

struct Summary {
    name: String,
    genotype: String,
    params: usize,
    full3d: usize,
    top1: f64,
    ablated: f64,
}

fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.txt");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let field = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
            .ok_or_else(|| anyhow!("{} lacks a {key} line", path.display()))
    };
    let num = |key: &str| -> Result<f64> {
        field(key)?
            .trim()
            .parse()
            .map_err(|_| anyhow!("{}: {key} is not a number", path.display()))
    };
    Ok(Summary {
        name: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        genotype: field("genotype")?.to_string(),
        params: num("params")? as usize,
        full3d: num("full3d_params")? as usize,
        top1: num("top1")?,
        ablated: num("ablated_top1")?,
    })
}

fn collect_runs(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.join("summary.txt").is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let entries = fs::read_dir(path).with_context(|| format!("cannot read run directory {}", path.display()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.txt").is_file())
        .collect();
    dirs.sort();
    out.extend(dirs);
    Ok(())
}

pub fn table(args: TableArgs) -> Result<()> {
    let mut dirs = Vec::new();
    for p in &args.runs {
        collect_runs(p, &mut dirs)?;
    }
    if dirs.is_empty() {
        bail!("no evaluated runs (directories with summary.txt) under the given paths; run `stnas eval` first");
    }
    let mut rows = dirs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.top1.total_cmp(&a.top1).then_with(|| a.name.cmp(&b.name)));
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.genotype.clone(),
                r.params.to_string(),
                r.full3d.to_string(),
                format!("{:.2}", 100.0 * r.top1),
                format!("{:.2}", 100.0 * r.ablated),
            ]
        })
        .collect();
    let text = render_table(
        &["run", "genotype", "params", "full-3D params", "top-1 %", "ablated %"],
        &cells,
    );
    print!("{text}");
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    Ok(())
}
