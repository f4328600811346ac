//! Reverse-mode automatic differentiation over [`Tensor5D`] values.
//!
//! A [`Tape`] records primitive applications in evaluation order. Each
//! recorded node keeps its output value plus whatever the backward rule
//! needs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients into every leaf that asked for one.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{Shape, Tensor5D};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Norm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum {
        terms: Vec<Option<Var>>,
        weights: Var,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor5D,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward traversal, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor5D>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor5D> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor5D> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros shaped like it if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor5D {
        self.get(v).cloned().unwrap_or_else(|| Tensor5D::zeros(shape))
    }
}

fn same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(dim_err!("{what}: shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor5D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor5D, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor5D, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor5D) -> Var {
        self.leaf(value, false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv_forward(self.value(x), self.value(w), &geom)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv { x, w, geom }, rg))
    }

    /// 2-D convolution over (H, W) with a (Cout, Cin, 1, k, k') kernel; time untouched.
    pub fn conv_spatial(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        if self.shape(w).t() != 1 {
            return Err(dim_err!("spatial kernel must have temporal extent 1, got {:?}", self.shape(w)));
        }
        self.conv3d(
            x,
            w,
            ConvGeom {
                stride: [1, stride, stride],
                pad: [0, pad, pad],
                dilation: [1, dilation, dilation],
            },
        )
    }

    /// 1-D convolution over T with a (Cout, Cin, k, 1, 1) kernel.
    pub fn conv_temporal(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w);
        if ws.h() != 1 || ws.w() != 1 {
            return Err(dim_err!("temporal kernel must be k x 1 x 1, got {ws:?}"));
        }
        self.conv3d(
            x,
            w,
            ConvGeom {
                stride: [stride, 1, 1],
                pad: [pad, 0, 0],
                dilation: [1, 1, 1],
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Batch normalization per channel over (N, T, H, W).
    ///
    /// In training mode the batch statistics are used and the updated running
    /// statistics are returned; the caller decides whether to commit them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: &RunningStats,
        training: bool,
        cfg: NormConfig,
    ) -> Result<(Var, Option<RunningStats>)> {
        let c = self.shape(x).c();
        for (p, name) in [(scale, "scale"), (shift, "shift")] {
            if self.value(p).len() != c {
                return Err(dim_err!("batch_norm {name} has {} entries for {c} channels", self.value(p).len()));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(dim_err!("batch_norm running stats sized for {} channels, input has {c}", running.mean.len()));
        }
        let (mean, var, updated) = if training {
            let (mean, var) = kernels::channel_stats(self.value(x));
            let count = (self.shape(x).n() * self.shape(x).plane()) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = cfg.momentum;
            let updated = RunningStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                    .collect(),
            };
            (mean, var, Some(updated))
        } else {
            (running.mean.clone(), running.var.clone(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let out = kernels::norm_affine(
            self.value(x),
            &mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let rg = self.rg(&[x, scale, shift]);
        let v = self.push(
            out,
            Op::Norm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats: training,
            },
            rg,
        );
        Ok((v, updated))
    }

    pub fn max_pool(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let (out, arg) = kernels::max_pool_forward(self.value(x), &geom)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, arg }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(x), &geom)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool { x, geom }, rg))
    }

    pub fn max_pool_spatial(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.max_pool(x, spatial_pool(k, stride, pad))
    }

    pub fn avg_pool_spatial(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.avg_pool(x, spatial_pool(k, stride, pad))
    }

    pub fn max_pool_temporal(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.max_pool(x, temporal_pool(k, stride, pad))
    }

    pub fn avg_pool_temporal(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.avg_pool(x, temporal_pool(k, stride, pad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor5D::from_vec(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor5D::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// `sum_j weights[j] * terms[j]`, where `weights` holds one scalar per
    /// term and a `None` term contributes nothing.
    pub fn weighted_sum(&mut self, terms: &[Option<Var>], weights: Var) -> Result<Var> {
        let wv = self.value(weights).data().to_vec();
        if wv.len() != terms.len() {
            return Err(dim_err!("weighted_sum: {} weights for {} terms", wv.len(), terms.len()));
        }
        let shape = terms
            .iter()
            .flatten()
            .map(|&t| self.shape(t))
            .next()
            .ok_or_else(|| dim_err!("weighted_sum needs at least one non-zero term"))?;
        let mut out = Tensor5D::zeros(shape);
        for (t, w) in terms.iter().zip(&wv) {
            if let Some(t) = t {
                same_shape(shape, self.shape(*t), "weighted_sum")?;
                out.axpy(*w, self.value(*t));
            }
        }
        let mut deps: Vec<Var> = terms.iter().flatten().copied().collect();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat_channels of an empty list"))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.with_c(0) != s0.with_c(0) {
                return Err(dim_err!("concat_channels: {s:?} does not match {s0:?} outside channels"));
            }
            channels += s.c();
        }
        let out_shape = s0.with_c(channels);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n() {
            for &p in parts {
                let v = self.value(p);
                for c in 0..v.shape().c() {
                    data.extend_from_slice(v.channel(n, c));
                }
            }
        }
        let out = Tensor5D::from_vec(out_shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean over (T, H, W), giving an (N, C, 1, 1, 1) tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let v = self.value(x);
        let p = s.plane() as f64;
        let data = (0..s.n())
            .flat_map(|n| (0..s.c()).map(move |c| (n, c)))
            .map(|(n, c)| v.channel(n, c).iter().sum::<f64>() / p)
            .collect();
        let out = Tensor5D::from_vec(Shape::new(s.n(), s.c(), 1, 1, 1), data).expect("pool shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// `x` is (N, F, 1, 1, 1), `w` is (K, F, 1, 1, 1), `b` has K entries.
    /// Returns (N, K, 1, 1, 1).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.plane() != 1 || ws.plane() != 1 {
            return Err(dim_err!("linear expects flat features, got {xs:?} and {ws:?}"));
        }
        let (f, k) = (xs.c(), ws.n());
        if ws.c() != f {
            return Err(dim_err!("linear weight {ws:?} expects {} features, input has {f}", ws.c()));
        }
        if self.value(b).len() != k {
            return Err(dim_err!("linear bias has {} entries for {k} outputs", self.value(b).len()));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = Vec::with_capacity(xs.n() * k);
        for n in 0..xs.n() {
            let row = &xd[n * f..(n + 1) * f];
            for o in 0..k {
                let wrow = &wd[o * f..(o + 1) * f];
                data.push(bd[o] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let out = Tensor5D::from_vec(Shape::new(xs.n(), k, 1, 1, 1), data)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Softmax across channels, independently per batch item; the input
    /// must be flat (T = H = W = 1).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() != 1 {
            return Err(dim_err!("softmax expects (N, C, 1, 1, 1), got {s:?}"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(s.c())
            .flat_map(softmax)
            .collect();
        let out = Tensor5D::from_vec(s, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.plane() != 1 {
            return Err(dim_err!("cross_entropy expects (N, C, 1, 1, 1) logits, got {s:?}"));
        }
        if labels.len() != s.n() {
            return Err(dim_err!("cross_entropy: {} labels for batch of {}", labels.len(), s.n()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= s.c()) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {})",
                s.c()
            )));
        }
        let mut probs = Vec::with_capacity(s.numel());
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(s.c()).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor5D::scalar(loss / s.n() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss` (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor5D>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor5D::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        // Non-leaf grads were consumed above; what remains sits on leaves.
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor5D>], v: Var, g: Tensor5D) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accum_scaled(&self, grads: &mut [Option<Tensor5D>], v: Var, s: f64, g: &Tensor5D) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(s, g),
            slot => *slot = Some(g.map(|x| s * x)),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor5D, grads: &mut [Option<Tensor5D>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                if self.requires_grad(*x) {
                    let dx = kernels::conv_backward_input(g, self.value(*w), self.shape(*x), geom);
                    self.accum(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let dw = kernels::conv_backward_weight(g, self.value(*x), self.shape(*w), geom);
                    self.accum(grads, *w, dw);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *x, Tensor5D::from_vec(g.shape(), data).unwrap());
            }
            Op::Norm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (dx, dscale, dshift) = kernels::norm_backward(
                    g,
                    self.value(*x),
                    mean,
                    inv_std,
                    self.value(*scale).data(),
                    *batch_stats,
                    self.requires_grad(*x),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                let ps = self.shape(*scale);
                self.accum(grads, *scale, Tensor5D::from_vec(ps, dscale).unwrap());
                self.accum(grads, *shift, Tensor5D::from_vec(ps, dshift).unwrap());
            }
            Op::MaxPool { x, arg } => {
                let dx = kernels::max_pool_backward(g, arg, self.shape(*x));
                self.accum(grads, *x, dx);
            }
            Op::AvgPool { x, geom } => {
                let dx = kernels::avg_pool_backward(g, self.shape(*x), geom);
                self.accum(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(target) {
                        let data = g
                            .data()
                            .iter()
                            .zip(self.value(other).data())
                            .map(|(x, y)| x * y)
                            .collect();
                        self.accum(grads, target, Tensor5D::from_vec(g.shape(), data).unwrap());
                    }
                }
            }
            Op::Scale(a, s) => self.accum_scaled(grads, *a, *s, g),
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, Tensor5D::full(self.shape(*a), gv));
            }
            Op::WeightedSum { terms, weights } => {
                let wv = self.value(*weights);
                let mut dw = vec![0.0; terms.len()];
                for (j, t) in terms.iter().enumerate() {
                    if let Some(t) = t {
                        self.accum_scaled(grads, *t, wv.data()[j], g);
                        dw[j] = kernel_dot(g.data(), self.value(*t).data());
                    }
                }
                self.accum(grads, *weights, Tensor5D::from_vec(wv.shape(), dw).unwrap());
            }
            Op::Concat(parts) => {
                let s = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(ps.numel());
                        for n in 0..s.n() {
                            for c in 0..ps.c() {
                                data.extend_from_slice(g.channel(n, offset + c));
                            }
                        }
                        self.accum(grads, p, Tensor5D::from_vec(ps, data).unwrap());
                    }
                    offset += ps.c();
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let p = xs.plane();
                let mut data = Vec::with_capacity(xs.numel());
                for v in g.data() {
                    data.extend(std::iter::repeat(v / p as f64).take(p));
                }
                self.accum(grads, *x, Tensor5D::from_vec(xs, data).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (f, k) = (xs.c(), ws.n());
                let (xd, wd, gd) = (self.value(*x).data(), self.value(*w).data(), g.data());
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; xs.numel()];
                    for n in 0..xs.n() {
                        for o in 0..k {
                            let gv = gd[n * k + o];
                            for (d, wv) in dx[n * f..(n + 1) * f].iter_mut().zip(&wd[o * f..(o + 1) * f]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor5D::from_vec(xs, dx).unwrap());
                }
                let mut dw = vec![0.0; ws.numel()];
                let mut db = vec![0.0; k];
                for n in 0..xs.n() {
                    for o in 0..k {
                        let gv = gd[n * k + o];
                        db[o] += gv;
                        for (d, xv) in dw[o * f..(o + 1) * f].iter_mut().zip(&xd[n * f..(n + 1) * f]) {
                            *d += gv * xv;
                        }
                    }
                }
                self.accum(grads, *w, Tensor5D::from_vec(ws, dw).unwrap());
                let bs = self.shape(*b);
                self.accum(grads, *b, Tensor5D::from_vec(bs, db).unwrap());
            }
            Op::Softmax(x) => {
                let s = g.shape();
                let y = &node.value;
                let mut data = Vec::with_capacity(s.numel());
                for (yr, gr) in y.data().chunks(s.c()).zip(g.data().chunks(s.c())) {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - inner)));
                }
                self.accum(grads, *x, Tensor5D::from_vec(s, data).unwrap());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(*logits);
                let scale = g.item() / s.n() as f64;
                let mut data = probs.clone();
                for (n, &l) in labels.iter().enumerate() {
                    data[n * s.c() + l] -= 1.0;
                }
                for d in &mut data {
                    *d *= scale;
                }
                self.accum(grads, *logits, Tensor5D::from_vec(s, data).unwrap());
            }
        }
    }
}

fn kernel_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn spatial_pool(k: usize, stride: usize, pad: usize) -> PoolGeom {
    PoolGeom {
        kernel: [1, k, k],
        stride: [1, stride, stride],
        pad: [0, pad, pad],
    }
}

pub fn temporal_pool(k: usize, stride: usize, pad: usize) -> PoolGeom {
    PoolGeom {
        kernel: [k, 1, 1],
        stride: [stride, 1, 1],
        pad: [pad, 0, 0],
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
