//! Whole networks: stem, stacked cells with adaptation layers, and a
//! pooled linear classifier. Also parameter accounting and checkpoints.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RunningStats, Var};
use crate::cell::{connection_count, ArchParams, Cell, CellSpec, Genotype};
use crate::error::{Error, Result};
use crate::operators::NUM_OPS;
use crate::params::{apply_updates, Forward, NormId, ParamId, ParamStore, Wrt};
use crate::tensor::{Shape, Tensor5D};

/// Stacking plan of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub depth: usize,
    pub init_channels: usize,
    pub nodes: usize,
    pub classes: usize,
    pub reduce_every: usize,
    pub in_channels: usize,
}

impl NetworkSpec {
    pub fn new(depth: usize, init_channels: usize, nodes: usize, classes: usize) -> Self {
        NetworkSpec {
            depth,
            init_channels,
            nodes,
            classes,
            reduce_every: 2,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.depth >= 1, "depth must be at least 1"),
            (self.init_channels >= 1, "init_channels must be at least 1"),
            (self.nodes >= 1, "nodes must be at least 1"),
            (self.classes >= 2, "classes must be at least 2"),
            (self.reduce_every >= 1, "reduce_every must be at least 1"),
            (self.in_channels >= 1, "in_channels must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Cell `i` halves the resolution and doubles the channels.
    pub fn is_reduction(&self, i: usize) -> bool {
        i > 0 && i % self.reduce_every == 0
    }

    pub fn reductions(&self) -> usize {
        (0..self.depth).filter(|&i| self.is_reduction(i)).count()
    }

    /// Per-node channel width of each cell.
    pub fn cell_channels(&self) -> Vec<usize> {
        let mut c = self.init_channels;
        (0..self.depth)
            .map(|i| {
                if self.is_reduction(i) {
                    c *= 2;
                }
                c
            })
            .collect()
    }

    pub fn connections(&self) -> usize {
        connection_count(self.nodes)
    }
}

/// A 1x1 ReLU-Conv-BN layer mapping a cell input to the cell's width,
/// strided when the input has a higher resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub weight: ParamId,
    pub norm: (ParamId, ParamId, NormId),
    pub stride: usize,
}

impl Adapter {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_conv(format!("{prefix}.w"), Shape::new(cout, cin, 1, 1, 1), rng);
        let norm = store.add_norm(&format!("{prefix}.bn"), cout);
        Adapter { weight, norm, stride }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let r = f.tape.relu(x);
        let w = f.param(self.weight);
        let h = f.tape.conv_spatial(r, w, self.stride, 0, 1)?;
        f.batch_norm(h, self.norm.0, self.norm.1, self.norm.2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub pre0: Adapter,
    pub pre1: Adapter,
    pub cell: Cell,
    pub reduction: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub spatial: ParamId,
    pub temporal: ParamId,
    pub norm: (ParamId, ParamId, NormId),
}

/// All learned state of a network plus the structure that uses it.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    pub genotype: Option<Genotype>,
    pub store: ParamStore,
    pub alpha: Option<ArchParams>,
    pub stem: Stem,
    pub layers: Vec<Layer>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// False once the temporal stages of pooling operators are removed.
    pub temporal_pools: bool,
}

/// Loss, accuracy and requested gradients of one batch.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub correct: usize,
    pub logits: Tensor5D,
    pub param_grads: Option<Vec<Tensor5D>>,
    pub alpha_grad: Option<Vec<f64>>,
    pub norm_updates: Vec<Option<RunningStats>>,
}

impl NetworkState {
    /// Builds a network with seeded initialization. Without a genotype the
    /// cells are continuous (all candidates on every edge, zero-initialized
    /// architecture weights).
    pub fn build(spec: &NetworkSpec, genotype: Option<&Genotype>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if let Some(g) = genotype {
            g.validate()?;
            if g.n() != spec.nodes {
                return Err(Error::Config(format!(
                    "genotype has {} nodes but the network spec asks for {}",
                    g.n(),
                    spec.nodes
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = spec.init_channels;
        let stem = Stem {
            spatial: store.add_conv("stem.w0", Shape::new(c0, spec.in_channels, 1, 3, 3), &mut rng),
            temporal: store.add_conv("stem.w1", Shape::new(c0, c0, 3, 1, 1), &mut rng),
            norm: store.add_norm("stem.bn", c0),
        };
        let widths = spec.cell_channels();
        // (channels, reduction level) of the two most recent outputs
        let (mut pp, mut p) = ((c0, 0usize), (c0, 0usize));
        let mut level = 0;
        let mut layers = Vec::with_capacity(spec.depth);
        for (i, &c) in widths.iter().enumerate() {
            let reduction = spec.is_reduction(i);
            if reduction {
                level += 1;
            }
            let prefix = format!("cell{i}");
            let pre0 = Adapter::new(&mut store, &format!("{prefix}.pre0"), pp.0, c, 1 << (level - pp.1), &mut rng);
            let pre1 = Adapter::new(&mut store, &format!("{prefix}.pre1"), p.0, c, 1 << (level - p.1), &mut rng);
            let cell_spec = CellSpec::new(spec.nodes, c)?;
            let cell = match genotype {
                Some(g) => Cell::discrete(g, c, &mut store, &prefix, &mut rng)?,
                None => Cell::continuous(cell_spec, &mut store, &prefix, &mut rng)?,
            };
            pp = p;
            p = (cell.out_channels(), level);
            layers.push(Layer {
                pre0,
                pre1,
                cell,
                reduction,
            });
        }
        let features = p.0;
        let bound = 1.0 / (features as f64).sqrt();
        let head_w = store.add(
            "head.w",
            Tensor5D::uniform(Shape::new(spec.classes, features, 1, 1, 1), bound, &mut rng),
            true,
        );
        let head_b = store.add(
            "head.b",
            Tensor5D::uniform(Shape::new(1, spec.classes, 1, 1, 1), bound, &mut rng),
            true,
        );
        Ok(NetworkState {
            spec: spec.clone(),
            genotype: genotype.cloned(),
            store,
            alpha: genotype.is_none().then(|| ArchParams::zeros(spec.connections())),
            stem,
            layers,
            head_w,
            head_b,
            temporal_pools: true,
        })
    }

    pub fn is_continuous(&self) -> bool {
        self.genotype.is_none()
    }

    /// Records the forward pass of `frames` and returns the logits.
    /// `alpha` overrides the stored architecture weights.
    pub fn forward_on(
        &self,
        f: &mut Forward,
        frames: &Tensor5D,
        alpha: Option<&[Var]>,
    ) -> Result<Var> {
        let s = frames.shape();
        if s.c() != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {s:?}",
                self.spec.in_channels
            )));
        }
        let divisor = 1usize << self.spec.reductions();
        if s.h() % divisor != 0 || s.w() % divisor != 0 {
            return Err(Error::Dimension(format!(
                "spatial size {}x{} must be divisible by {divisor} for {} reductions",
                s.h(),
                s.w(),
                self.spec.reductions()
            )));
        }
        let x = f.tape.constant(frames.clone());
        let w0 = f.param(self.stem.spatial);
        let h = f.tape.conv_spatial(x, w0, 1, 1, 1)?;
        let w1 = f.param(self.stem.temporal);
        let h = f.tape.conv_temporal(h, w1, 1, 1)?;
        let stem = f.batch_norm(h, self.stem.norm.0, self.stem.norm.1, self.stem.norm.2)?;
        let (mut pp, mut p) = (stem, stem);
        for layer in &self.layers {
            let a = layer.pre0.forward(f, pp)?;
            let b = layer.pre1.forward(f, p)?;
            let out = layer.cell.forward(f, alpha, a, b)?;
            pp = p;
            p = out;
        }
        let pooled = f.tape.global_avg_pool(p);
        let (w, b) = (f.param(self.head_w), f.param(self.head_b));
        f.tape.linear(pooled, w, b)
    }

    /// Logits of a batch without recording gradients.
    pub fn logits(&self, frames: &Tensor5D, training: bool) -> Result<Tensor5D> {
        let values = self.store.values();
        let mut f = Forward::new(&self.store, &values, training, false);
        f.temporal_pools = self.temporal_pools;
        let alpha = self.alpha_leaves(&mut f, self.alpha.as_ref(), false);
        let out = self.forward_on(&mut f, frames, alpha.as_deref())?;
        Ok(f.tape.value(out).clone())
    }

    fn alpha_leaves(&self, f: &mut Forward, alpha: Option<&ArchParams>, grad: bool) -> Option<Vec<Var>> {
        alpha.map(|a| {
            (0..a.rows())
                .map(|k| f.tape.leaf(Tensor5D::vector(a.row(k).to_vec()), grad))
                .collect()
        })
    }

    /// Cross-entropy on a batch at explicit parameter values and
    /// architecture, with gradients w.r.t. whatever `wrt` asks for.
    pub fn loss_grads(
        &self,
        params: &[Tensor5D],
        alpha: Option<&ArchParams>,
        frames: &Tensor5D,
        labels: &[usize],
        training: bool,
        wrt: Wrt,
    ) -> Result<LossGrads> {
        let mut f = Forward::new(&self.store, params, training, wrt.params);
        f.temporal_pools = self.temporal_pools;
        let alpha = alpha.or(self.alpha.as_ref());
        if self.is_continuous() && alpha.is_none() {
            return Err(Error::Config("continuous network without architecture weights".into()));
        }
        let alpha_vars = self.alpha_leaves(&mut f, alpha, wrt.alpha);
        let logits = self.forward_on(&mut f, frames, alpha_vars.as_deref())?;
        let loss = f.tape.cross_entropy(logits, labels)?;
        let lv = f.tape.value(loss).item();
        let logit_values = f.tape.value(logits).clone();
        let correct = count_correct(&logit_values, labels);
        let norm_updates = f.take_updates();
        let (param_grads, alpha_grad) = if wrt.params || wrt.alpha {
            let mut grads = f.tape.backward(loss);
            let pg = wrt.params.then(|| {
                f.param_vars()
                    .iter()
                    .zip(params)
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor5D::zeros(p.shape())))
                    .collect()
            });
            let ag = match (&alpha_vars, wrt.alpha) {
                (Some(vars), true) => {
                    let mut out = Vec::with_capacity(vars.len() * NUM_OPS);
                    for &v in vars {
                        match grads.get(v) {
                            Some(g) => out.extend_from_slice(g.data()),
                            None => out.extend(std::iter::repeat(0.0).take(NUM_OPS)),
                        }
                    }
                    Some(out)
                }
                _ => None,
            };
            (pg, ag)
        } else {
            (None, None)
        };
        Ok(LossGrads {
            loss: lv,
            correct,
            logits: logit_values,
            param_grads,
            alpha_grad,
            norm_updates,
        })
    }

    pub fn commit_norm_updates(&mut self, updates: Vec<Option<RunningStats>>) {
        apply_updates(&mut self.store, updates);
    }

    /// Total learned scalars, with a per-layer breakdown.
    pub fn count_params(&self) -> ParamCount {
        let mut layers: Vec<LayerCount> = Vec::new();
        for p in &self.store.params {
            let layer = p.name.split('.').next().unwrap_or("").to_string();
            if layers.last().map(|l| l.layer != layer).unwrap_or(true) {
                layers.push(LayerCount {
                    layer: layer.clone(),
                    ..Default::default()
                });
            }
            let entry = layers.last_mut().unwrap();
            let n = p.value.len();
            let rest = &p.name[layer.len()..];
            if rest.contains(".bn.") {
                entry.norm += n;
            } else if layer == "head" {
                entry.linear += n;
            } else if rest.starts_with(".pre") {
                entry.adapt += n;
            } else {
                entry.conv += n;
            }
        }
        let total = layers.iter().map(LayerCount::total).sum();
        ParamCount { total, layers }
    }

    /// Analytic parameter count of the same network with every factorized
    /// convolution replaced by one full 3-D kernel of the same extent.
    pub fn full3d_param_count(&self) -> usize {
        let spec = &self.spec;
        let c0 = spec.init_channels;
        let mut total = 27 * spec.in_channels * c0 + 2 * c0;
        for layer in &self.layers {
            for pre in [&layer.pre0, &layer.pre1] {
                total += self.store.value(pre.weight).len() + 2 * self.store.value(pre.norm.0).len();
            }
            for op in layer.cell.operators() {
                if !op.kind.is_parametric() {
                    continue;
                }
                let k = if op.kind == crate::operators::OperatorKind::Conv1 { 1 } else { 27 };
                total += k * op.in_channels * op.out_channels + 2 * op.out_channels;
            }
        }
        total + self.store.value(self.head_w).len() + self.store.value(self.head_b).len()
    }

    /// Replaces parameters whose names also exist in `src` with its values.
    /// Returns how many were copied.
    pub fn copy_params_from(&mut self, src: &NetworkState) -> usize {
        let mut copied = 0;
        for p in &mut self.store.params {
            if let Some(id) = src.store.find(&p.name) {
                let v = src.store.value(id);
                if v.shape() == p.value.shape() {
                    p.value = v.clone();
                    copied += 1;
                }
            }
        }
        for buf in &mut self.store.norms {
            if let Some(other) = src.store.norms.iter().find(|b| b.name == buf.name) {
                if other.stats.mean.len() == buf.stats.mean.len() {
                    buf.stats = other.stats.clone();
                }
            }
        }
        copied
    }
}

pub fn count_correct(logits: &Tensor5D, labels: &[usize]) -> usize {
    let k = logits.shape().c();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: String,
    /// Convolutions inside the stem or a cell's operators.
    pub conv: usize,
    /// 1x1 adaptation convolutions in front of a cell.
    pub adapt: usize,
    pub norm: usize,
    pub linear: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.conv + self.adapt + self.norm + self.linear
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub layers: Vec<LayerCount>,
}

const CHECKPOINT_MAGIC: &str = "STNASCKPT1";

fn mode_name(state: &NetworkState) -> &'static str {
    if state.is_continuous() {
        "continuous"
    } else {
        "discrete"
    }
}

impl NetworkState {
    /// Writes the checkpoint: a text header, then parameters, norm running
    /// statistics and (continuous mode) architecture weights as
    /// little-endian f32.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let s = &self.spec;
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "depth {}", s.depth)?;
        writeln!(w, "init_channels {}", s.init_channels)?;
        writeln!(w, "nodes {}", s.nodes)?;
        writeln!(w, "classes {}", s.classes)?;
        writeln!(w, "reduce_every {}", s.reduce_every)?;
        writeln!(w, "in_channels {}", s.in_channels)?;
        writeln!(w, "mode {}", mode_name(self))?;
        writeln!(w, "temporal_pools {}", u8::from(self.temporal_pools))?;
        if let Some(g) = &self.genotype {
            for line in g.to_text().lines() {
                writeln!(w, "> {line}")?;
            }
        }
        writeln!(w, "params {}", self.store.numel())?;
        writeln!(w, "norms {}", self.store.norms.len())?;
        writeln!(w, "end")?;
        let mut put = |v: f64| w.write_all(&(v as f32).to_le_bytes());
        for p in &self.store.params {
            for &v in p.value.data() {
                put(v)?;
            }
        }
        for b in &self.store.norms {
            for &v in b.stats.mean.iter().chain(&b.stats.var) {
                put(v)?;
            }
        }
        if let Some(a) = &self.alpha {
            for &v in a.values() {
                put(v)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            let n = r
                .read_line(&mut line)
                .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
            if n == 0 {
                return Err(Error::Format("checkpoint header not terminated by \"end\"".into()));
            }
            let line = line.trim_end().to_string();
            if line == "end" {
                break;
            }
            header.push(line);
        }
        if header.first().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Format(format!("not a checkpoint (expected {CHECKPOINT_MAGIC})")));
        }
        let field = |key: &str| -> Result<usize> {
            header
                .iter()
                .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks {key}")))?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint field {key} is not an integer")))
        };
        let spec = NetworkSpec {
            depth: field("depth")?,
            init_channels: field("init_channels")?,
            nodes: field("nodes")?,
            classes: field("classes")?,
            reduce_every: field("reduce_every")?,
            in_channels: field("in_channels")?,
        };
        let geno_text: String = header
            .iter()
            .filter_map(|l| l.strip_prefix("> "))
            .map(|l| format!("{l}\n"))
            .collect();
        let mode = header
            .iter()
            .find_map(|l| l.strip_prefix("mode "))
            .ok_or_else(|| Error::Format("checkpoint header lacks mode".into()))?;
        let genotype = match mode {
            "discrete" => Some(Genotype::parse(&geno_text)?),
            "continuous" => None,
            other => return Err(Error::Format(format!("unknown checkpoint mode {other:?}"))),
        };
        let mut state = NetworkState::build(&spec, genotype.as_ref(), 0)?;
        state.temporal_pools = field("temporal_pools")? != 0;
        if field("params")? != state.store.numel() || field("norms")? != state.store.norms.len() {
            return Err(Error::Format("checkpoint sizes do not match its architecture".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("checkpoint body: {e}")))?;
        let mut vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let expected = state.store.numel()
            + state.store.norms.iter().map(|b| 2 * b.stats.mean.len()).sum::<usize>()
            + state.alpha.as_ref().map_or(0, |a| a.values().len());
        if bytes.len() != 4 * expected {
            return Err(Error::Format(format!(
                "checkpoint body has {} bytes, expected {}",
                bytes.len(),
                4 * expected
            )));
        }
        for p in &mut state.store.params {
            for v in p.value.data_mut() {
                *v = vals.next().unwrap();
            }
        }
        for b in &mut state.store.norms {
            for v in b.stats.mean.iter_mut().chain(b.stats.var.iter_mut()) {
                *v = vals.next().unwrap();
            }
        }
        if let Some(a) = &mut state.alpha {
            for v in a.values_mut() {
                *v = vals.next().unwrap();
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}
