//! The searchable cell: connection layout, architecture weights, the
//! discrete genotype and its text format, and the cell forward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{softmax, Var};
use crate::error::{Error, Result};
use crate::operators::{candidate_set, mixed_op, OperatorInstance, OperatorKind, NUM_OPS};
use crate::params::{Forward, ParamStore};

/// Where a connection reads from: one of the two previous cell outputs or
/// an earlier node of the same cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    PrevPrev,
    Prev,
    Node(usize),
}

impl Source {
    /// Position among the sources of a node: pp = 0, p = 1, node j = j + 2.
    pub fn position(self) -> usize {
        match self {
            Source::PrevPrev => 0,
            Source::Prev => 1,
            Source::Node(j) => j + 2,
        }
    }

    pub fn from_position(pos: usize) -> Self {
        match pos {
            0 => Source::PrevPrev,
            1 => Source::Prev,
            j => Source::Node(j - 2),
        }
    }

    /// Legal as an input of node `dest`.
    pub fn valid_for(self, dest: usize) -> bool {
        match self {
            Source::Node(j) => j < dest,
            _ => true,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::PrevPrev => f.write_str("pp"),
            Source::Prev => f.write_str("p"),
            Source::Node(j) => write!(f, "n{j}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pp" => Ok(Source::PrevPrev),
            "p" => Ok(Source::Prev),
            _ => s
                .strip_prefix('n')
                .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|d| d.parse().ok())
                .map(Source::Node)
                .ok_or_else(|| Error::Format(format!("unknown source {s:?}"))),
        }
    }
}

/// Number of connections in a cell of `n` nodes: `(n+1)(n+2)/2 - 1`.
pub fn connection_count(n: usize) -> usize {
    (n + 1) * (n + 2) / 2 - 1
}

/// All (destination node, source) pairs, destination ascending, then
/// sources in the order pp, p, n0, n1, ...
pub fn enumerate_connections(n: usize) -> Result<Vec<(usize, Source)>> {
    if n < 1 {
        return Err(Error::Domain("a cell needs at least one node".into()));
    }
    Ok((0..n)
        .flat_map(|i| (0..i + 2).map(move |pos| (i, Source::from_position(pos))))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub nodes: usize,
    pub channels: usize,
}

impl CellSpec {
    pub fn new(nodes: usize, channels: usize) -> Result<Self> {
        if nodes < 1 {
            return Err(Error::Domain("a cell needs at least one node".into()));
        }
        if channels < 1 {
            return Err(Error::Domain("a cell needs at least one channel".into()));
        }
        Ok(CellSpec { nodes, channels })
    }

    pub fn connections(&self) -> usize {
        connection_count(self.nodes)
    }

    /// Index `k` of the connection into node `dest` from `src`.
    pub fn connection_index(&self, dest: usize, src: Source) -> Option<usize> {
        if dest >= self.nodes || !src.valid_for(dest) {
            return None;
        }
        Some(dest * (dest + 3) / 2 + src.position())
    }

    /// Inverse of [`connection_index`](Self::connection_index).
    pub fn connection(&self, k: usize) -> Option<(usize, Source)> {
        if k >= self.connections() {
            return None;
        }
        let mut dest = 0;
        while (dest + 1) * (dest + 4) / 2 <= k {
            dest += 1;
        }
        Some((dest, Source::from_position(k - dest * (dest + 3) / 2)))
    }

    /// Connection indices feeding node `dest`.
    pub fn incoming(&self, dest: usize) -> std::ops::Range<usize> {
        let start = dest * (dest + 3) / 2;
        start..start + dest + 2
    }
}

/// Continuous architecture encoding: one row of operator logits per
/// connection, shared by every cell of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    rows: usize,
    values: Vec<f64>,
}

impl ArchParams {
    pub fn zeros(connections: usize) -> Self {
        ArchParams {
            rows: connections,
            values: vec![0.0; connections * NUM_OPS],
        }
    }

    pub fn from_values(connections: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != connections * NUM_OPS {
            return Err(Error::Dimension(format!(
                "{} architecture values for {connections} x {NUM_OPS}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("architecture weights must be finite".into()));
        }
        Ok(ArchParams {
            rows: connections,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * NUM_OPS..(k + 1) * NUM_OPS]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * NUM_OPS..(k + 1) * NUM_OPS]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row-wise softmax.
    pub fn weights(&self) -> Vec<f64> {
        self.values.chunks(NUM_OPS).flat_map(softmax).collect()
    }

    /// Space-separated matrix, one connection per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in 0..self.rows {
            let row: Vec<String> = self.row(k).iter().map(|v| format!("{v:.6e}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Discrete cell: two (source, operator) edges per node.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub nodes: Vec<[(Source, OperatorKind); 2]>,
}

/// Version tag of the genotype text format and canonical operator order.
pub const GENOTYPE_VERSION: &str = "v1";

impl Genotype {
    pub fn new(nodes: Vec<[(Source, OperatorKind); 2]>) -> Result<Self> {
        let g = Genotype { nodes };
        g.validate()?;
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Domain("genotype has no nodes".into()));
        }
        for (i, edges) in self.nodes.iter().enumerate() {
            let [(s0, k0), (s1, k1)] = *edges;
            if s0 == s1 {
                return Err(Error::Domain(format!("node {i} uses source {s0} twice")));
            }
            for (s, k) in [(s0, k0), (s1, k1)] {
                if !s.valid_for(i) {
                    return Err(Error::Domain(format!("node {i} cannot read from {s}")));
                }
                if k == OperatorKind::Zero {
                    return Err(Error::Domain(format!("node {i} uses the Zero operator")));
                }
            }
        }
        Ok(())
    }

    /// Same edges on every node: `(pp, op)` and `(p, op)`.
    pub fn uniform(n: usize, op: OperatorKind) -> Result<Self> {
        Self::new(vec![[(Source::PrevPrev, op), (Source::Prev, op)]; n])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("genotype {GENOTYPE_VERSION}\nnodes {}\n", self.n());
        for (i, [(s0, k0), (s1, k1)]) in self.nodes.iter().enumerate() {
            s.push_str(&format!("node {i} {s0} {k0} {s1} {k1}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty genotype".into()))?;
        if header != format!("genotype {GENOTYPE_VERSION}") {
            return Err(perr(ln, format!("expected \"genotype {GENOTYPE_VERSION}\", got {header:?}")));
        }
        let (ln, count) = lines.next().ok_or_else(|| perr(ln + 1, "missing nodes line".into()))?;
        let n: usize = count
            .strip_prefix("nodes ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(ln, format!("expected \"nodes <n>\", got {count:?}")))?;
        let mut nodes = Vec::with_capacity(n);
        for (ln, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 || f[0] != "node" {
                return Err(perr(ln, format!("expected \"node <i> <src> <op> <src> <op>\", got {line:?}")));
            }
            let idx: usize = f[1].parse().map_err(|_| perr(ln, format!("bad node index {:?}", f[1])))?;
            if idx != nodes.len() {
                return Err(perr(ln, format!("expected node {}, got {idx}", nodes.len())));
            }
            let edge = |s: &str, k: &str| -> Result<(Source, OperatorKind)> {
                Ok((
                    s.parse().map_err(|e: Error| perr(ln, e.to_string()))?,
                    k.parse().map_err(|e: Error| perr(ln, e.to_string()))?,
                ))
            };
            nodes.push([edge(f[2], f[3])?, edge(f[4], f[5])?]);
        }
        if nodes.len() != n {
            return Err(perr(0, format!("header declares {n} nodes, found {}", nodes.len())));
        }
        Genotype::new(nodes)
    }

    /// 64-bit FNV-1a of the text form, as 16 hex digits.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Strength of one connection: the largest softmax weight among its
/// non-Zero operators.
pub fn connection_score(row: &[f64]) -> f64 {
    softmax(row)[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Strongest non-Zero operator of a row; ties go to the lower index.
pub fn best_operator(row: &[f64]) -> OperatorKind {
    let w = softmax(row);
    let mut best = 1;
    for j in 2..NUM_OPS {
        if w[j] > w[best] {
            best = j;
        }
    }
    OperatorKind::from_index(best).unwrap()
}

/// Keeps the two strongest incoming connections of every node and the
/// strongest non-Zero operator on each. Ties resolve to lower indices.
pub fn discretize(spec: &CellSpec, alpha: &ArchParams) -> Result<Genotype> {
    if alpha.rows() != spec.connections() {
        return Err(Error::Dimension(format!(
            "architecture has {} rows, cell needs {}",
            alpha.rows(),
            spec.connections()
        )));
    }
    let mut nodes = Vec::with_capacity(spec.nodes);
    for i in 0..spec.nodes {
        let mut ranked: Vec<(usize, f64)> = spec
            .incoming(i)
            .map(|k| (k, connection_score(alpha.row(k))))
            .collect();
        // stable sort keeps lower indices first among equal scores
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut kept = [ranked[0].0, ranked[1].0];
        kept.sort_unstable();
        let edge = |k: usize| {
            let (_, src) = spec.connection(k).expect("incoming connection");
            (src, best_operator(alpha.row(k)))
        };
        nodes.push([edge(kept[0]), edge(kept[1])]);
    }
    Genotype::new(nodes)
}

/// Operators of one cell: all candidates on every connection, or the two
/// chosen edges per node.
#[derive(Clone, Debug, PartialEq)]
pub enum CellOps {
    Continuous(Vec<Vec<OperatorInstance>>),
    Discrete(Vec<[(Source, OperatorInstance); 2]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub spec: CellSpec,
    pub ops: CellOps,
}

fn edge_prefix(prefix: &str, dest: usize, src: Source) -> String {
    format!("{prefix}.n{dest}.{src}")
}

impl Cell {
    pub fn continuous<R: Rng>(spec: CellSpec, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let ops = enumerate_connections(spec.nodes)?
            .into_iter()
            .map(|(dest, src)| candidate_set(spec.channels, store, &edge_prefix(prefix, dest, src), rng))
            .collect::<Result<_>>()?;
        Ok(Cell {
            spec,
            ops: CellOps::Continuous(ops),
        })
    }

    pub fn discrete<R: Rng>(
        genotype: &Genotype,
        channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        genotype.validate()?;
        let spec = CellSpec::new(genotype.n(), channels)?;
        let mut nodes = Vec::with_capacity(genotype.n());
        for (i, edges) in genotype.nodes.iter().enumerate() {
            let mut make = |(src, kind): (Source, OperatorKind)| -> Result<(Source, OperatorInstance)> {
                let p = edge_prefix(prefix, i, src);
                Ok((src, OperatorInstance::new(kind, channels, channels, store, &p, rng)?))
            };
            nodes.push([make(edges[0])?, make(edges[1])?]);
        }
        Ok(Cell {
            spec,
            ops: CellOps::Discrete(nodes),
        })
    }

    /// Output channels: the concatenation of all nodes.
    pub fn out_channels(&self) -> usize {
        self.spec.nodes * self.spec.channels
    }

    pub fn operators(&self) -> Vec<&OperatorInstance> {
        match &self.ops {
            CellOps::Continuous(c) => c.iter().flatten().collect(),
            CellOps::Discrete(d) => d.iter().flat_map(|e| e.iter().map(|(_, op)| op)).collect(),
        }
    }

    /// Runs the cell on already-adapted inputs. Continuous cells need one
    /// architecture row per connection in `alpha`.
    pub fn forward(&self, f: &mut Forward, alpha: Option<&[Var]>, pp: Var, p: Var) -> Result<Var> {
        let (sp, s) = (f.tape.shape(pp), f.tape.shape(p));
        if sp != s {
            return Err(Error::Dimension(format!("cell inputs differ: {sp:?} vs {s:?}")));
        }
        if s.c() != self.spec.channels {
            return Err(Error::Dimension(format!(
                "cell expects {} channels, inputs have {}",
                self.spec.channels,
                s.c()
            )));
        }
        let mut states = vec![pp, p];
        for i in 0..self.spec.nodes {
            let mut acc: Option<Var> = None;
            let mut push = |f: &mut Forward, v: Var| -> Result<()> {
                acc = Some(match acc {
                    None => v,
                    Some(a) => f.tape.add(a, v)?,
                });
                Ok(())
            };
            match &self.ops {
                CellOps::Continuous(edges) => {
                    let alpha = alpha.ok_or_else(|| {
                        Error::Config("continuous cell needs architecture weights".into())
                    })?;
                    if alpha.len() != self.spec.connections() {
                        return Err(Error::Dimension(format!(
                            "{} architecture rows for {} connections",
                            alpha.len(),
                            self.spec.connections()
                        )));
                    }
                    for k in self.spec.incoming(i) {
                        let (_, src) = self.spec.connection(k).unwrap();
                        let v = mixed_op(f, states[src.position()], alpha[k], &edges[k])?;
                        push(f, v)?;
                    }
                }
                CellOps::Discrete(nodes) => {
                    for (src, op) in &nodes[i] {
                        let v = op.apply(f, states[src.position()])?;
                        push(f, v)?;
                    }
                }
            }
            states.push(acc.expect("every node has inputs"));
        }
        f.tape.concat_channels(&states[2..])
    }
}
