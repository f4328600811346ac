//! Flat, ordered storage of learned parameters and batch-norm buffers, and
//! the forward-pass context that exposes them as tape leaves.

use rand::Rng;

use crate::autodiff::{NormConfig, RunningStats, Tape, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor5D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor5D,
    /// Whether weight decay applies (false for norm scale/shift).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormBuffer {
    pub name: String,
    pub stats: RunningStats,
}

/// Parameters in creation order. The order is stable for a given
/// architecture and is the serialization order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub norms: Vec<NormBuffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor5D, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Conv weight with uniform init in `±1/sqrt(fan_in)`.
    pub fn add_conv<R: Rng>(&mut self, name: impl Into<String>, shape: Shape, rng: &mut R) -> ParamId {
        let fan_in = shape.c() * shape.plane();
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor5D::uniform(shape, bound, rng), true)
    }

    /// Scale (ones), shift (zeros) and running statistics of a norm layer.
    pub fn add_norm(&mut self, prefix: &str, channels: usize) -> (ParamId, ParamId, NormId) {
        let scale = self.add(format!("{prefix}.scale"), Tensor5D::vector(vec![1.0; channels]), false);
        let shift = self.add(format!("{prefix}.shift"), Tensor5D::vector(vec![0.0; channels]), false);
        self.norms.push(NormBuffer {
            name: prefix.to_string(),
            stats: RunningStats::new(channels),
        });
        (scale, shift, NormId(self.norms.len() - 1))
    }

    pub fn value(&self, id: ParamId) -> &Tensor5D {
        &self.params[id.0].value
    }

    pub fn values(&self) -> Vec<Tensor5D> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learned scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten(self.params.iter().map(|p| &p.value))
    }

    /// Overwrites parameter values from a flat vector in store order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, flat.len());
    }

    /// Splits a flat vector into tensors shaped like the parameters.
    pub fn unflatten(&self, flat: &[f64]) -> Vec<Tensor5D> {
        let mut off = 0;
        self.params
            .iter()
            .map(|p| {
                let n = p.value.len();
                let t = Tensor5D::from_vec(p.value.shape(), flat[off..off + n].to_vec())
                    .expect("parameter shape");
                off += n;
                t
            })
            .collect()
    }
}

pub fn flatten<'a>(tensors: impl IntoIterator<Item = &'a Tensor5D>) -> Vec<f64> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

/// Which leaves a forward pass should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wrt {
    pub params: bool,
    pub alpha: bool,
}

impl Wrt {
    pub const NONE: Wrt = Wrt {
        params: false,
        alpha: false,
    };
    pub const PARAMS: Wrt = Wrt {
        params: true,
        alpha: false,
    };
    pub const ALPHA: Wrt = Wrt {
        params: false,
        alpha: true,
    };
    pub const BOTH: Wrt = Wrt {
        params: true,
        alpha: true,
    };
}

/// One forward pass: a tape holding every parameter as a leaf, plus the
/// batch-norm statistics gathered along the way.
pub struct Forward<'a> {
    pub tape: Tape,
    params: Vec<Var>,
    norms: &'a [NormBuffer],
    pub training: bool,
    pub norm_cfg: NormConfig,
    /// When false, pooling operators skip their temporal stage.
    pub temporal_pools: bool,
    updates: Vec<Option<RunningStats>>,
}

impl<'a> Forward<'a> {
    /// Registers `values` (in store order) as leaves. `values` may differ
    /// from the store's own values, e.g. for perturbed weights.
    pub fn new(store: &'a ParamStore, values: &[Tensor5D], training: bool, params_grad: bool) -> Self {
        debug_assert_eq!(values.len(), store.params.len());
        let mut tape = Tape::new();
        let params = values
            .iter()
            .map(|v| tape.leaf(v.clone(), params_grad))
            .collect();
        Forward {
            tape,
            params,
            norms: &store.norms,
            training,
            norm_cfg: NormConfig::default(),
            temporal_pools: true,
            updates: vec![None; store.norms.len()],
        }
    }

    /// Wraps an existing tape whose leaves `params` hold the parameters in
    /// store order.
    pub fn from_leaves(tape: Tape, params: Vec<Var>, store: &'a ParamStore, training: bool) -> Self {
        debug_assert_eq!(params.len(), store.params.len());
        Forward {
            tape,
            params,
            norms: &store.norms,
            training,
            norm_cfg: NormConfig::default(),
            temporal_pools: true,
            updates: vec![None; store.norms.len()],
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn batch_norm(&mut self, x: Var, scale: ParamId, shift: ParamId, norm: NormId) -> Result<Var> {
        let (s, b) = (self.param(scale), self.param(shift));
        let (y, upd) =
            self.tape
                .batch_norm(x, s, b, &self.norms[norm.0].stats, self.training, self.norm_cfg)?;
        if let Some(u) = upd {
            self.updates[norm.0] = Some(u);
        }
        Ok(y)
    }

    /// Running statistics updated during this pass (training mode only).
    pub fn take_updates(&mut self) -> Vec<Option<RunningStats>> {
        std::mem::take(&mut self.updates)
    }
}

/// Commits batch-norm running statistics gathered by a training pass.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<Option<RunningStats>>) {
    for (buf, upd) in store.norms.iter_mut().zip(updates) {
        if let Some(u) = upd {
            buf.stats = u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flat_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_conv("a", Shape::new(2, 3, 1, 3, 3), &mut rng);
        store.add_norm("bn", 2);
        let flat = store.flatten();
        assert_eq!(flat.len(), store.numel());
        assert_eq!(store.numel(), 54 + 4);
        let parts = store.unflatten(&flat);
        assert_eq!(parts, store.values());
        let mut other = store.clone();
        other.set_flat(&vec![0.5; flat.len()]);
        other.set_flat(&flat);
        assert_eq!(other, store);
    }

    #[test]
    fn conv_init_respects_fan_in_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let id = store.add_conv("w", Shape::new(4, 4, 3, 1, 1), &mut rng);
        let bound = 1.0 / 12f64.sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
    }
}
