//! The eight candidate operators, each factorized into a spatial part and a
//! temporal part, and the softmax-weighted mixture used on searchable edges.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::params::{Forward, NormId, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor5D};

/// Candidate operators in canonical order. The discriminant is the column
/// index into the architecture matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    Zero = 0,
    SkipCon = 1,
    Conv1 = 2,
    Conv3 = 3,
    SpeConv3 = 4,
    DilConv3 = 5,
    MPool3 = 6,
    APool3 = 7,
}

pub const NUM_OPS: usize = 8;

impl OperatorKind {
    pub const ALL: [OperatorKind; NUM_OPS] = [
        OperatorKind::Zero,
        OperatorKind::SkipCon,
        OperatorKind::Conv1,
        OperatorKind::Conv3,
        OperatorKind::SpeConv3,
        OperatorKind::DilConv3,
        OperatorKind::MPool3,
        OperatorKind::APool3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Zero => "Zero",
            OperatorKind::SkipCon => "Skip_Con",
            OperatorKind::Conv1 => "Conv_1",
            OperatorKind::Conv3 => "Conv_3",
            OperatorKind::SpeConv3 => "SpeConv_3",
            OperatorKind::DilConv3 => "DilConv_3",
            OperatorKind::MPool3 => "MPool_3",
            OperatorKind::APool3 => "APool_3",
        }
    }

    /// Operators that own convolution weights.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            OperatorKind::Conv1 | OperatorKind::Conv3 | OperatorKind::SpeConv3 | OperatorKind::DilConv3
        )
    }

    /// Convolution kernels as (Cout, Cin, kt, kh, kw), in application order.
    /// Intermediate channel count equals `cout`.
    pub fn conv_shapes(self, cin: usize, cout: usize) -> Vec<Shape> {
        let s = |ci, kt, kh, kw| Shape::new(cout, ci, kt, kh, kw);
        match self {
            OperatorKind::Conv1 => vec![s(cin, 1, 1, 1), s(cout, 1, 1, 1)],
            OperatorKind::Conv3 | OperatorKind::DilConv3 => vec![s(cin, 1, 3, 3), s(cout, 3, 1, 1)],
            OperatorKind::SpeConv3 => vec![s(cin, 1, 1, 3), s(cout, 1, 3, 1), s(cout, 3, 1, 1)],
            _ => vec![],
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown operator {s:?}")))
    }
}

/// Padding and dilation of one factorized convolution stage.
#[derive(Clone, Copy, Debug)]
struct Stage {
    pad: [usize; 3],
    dilation: [usize; 3],
}

fn stages(kind: OperatorKind) -> &'static [Stage] {
    const P0: Stage = Stage {
        pad: [0, 0, 0],
        dilation: [1, 1, 1],
    };
    const S3: Stage = Stage {
        pad: [0, 1, 1],
        dilation: [1, 1, 1],
    };
    const T3: Stage = Stage {
        pad: [1, 0, 0],
        dilation: [1, 1, 1],
    };
    const D3: Stage = Stage {
        pad: [0, 2, 2],
        dilation: [1, 2, 2],
    };
    const W3: Stage = Stage {
        pad: [0, 0, 1],
        dilation: [1, 1, 1],
    };
    const H3: Stage = Stage {
        pad: [0, 1, 0],
        dilation: [1, 1, 1],
    };
    match kind {
        OperatorKind::Conv1 => &[P0, P0],
        OperatorKind::Conv3 => &[S3, T3],
        OperatorKind::DilConv3 => &[D3, T3],
        OperatorKind::SpeConv3 => &[W3, H3, T3],
        _ => &[],
    }
}

/// One operator on one edge, with handles to its learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorInstance {
    pub kind: OperatorKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<ParamId>,
    pub norm: Option<(ParamId, ParamId, NormId)>,
}

impl OperatorInstance {
    /// Creates the operator and registers its parameters under `prefix`.
    pub fn new<R: Rng>(
        kind: OperatorKind,
        in_channels: usize,
        out_channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(dim_err!("{kind} needs positive channel counts"));
        }
        if !kind.is_parametric() && in_channels != out_channels {
            return Err(dim_err!(
                "{kind} cannot map {in_channels} to {out_channels} channels"
            ));
        }
        let mut weights = Vec::new();
        let mut norm = None;
        if kind.is_parametric() {
            for (i, shape) in kind.conv_shapes(in_channels, out_channels).into_iter().enumerate() {
                weights.push(store.add_conv(format!("{prefix}.{kind}.w{i}"), shape, rng));
            }
            norm = Some(store.add_norm(&format!("{prefix}.{kind}.bn"), out_channels));
        }
        Ok(OperatorInstance {
            kind,
            in_channels,
            out_channels,
            weights,
            norm,
        })
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        let mut n: usize = self.weights.iter().map(|&w| store.value(w).len()).sum();
        if let Some((s, b, _)) = self.norm {
            n += store.value(s).len() + store.value(b).len();
        }
        n
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        self.check_input(f, x)?;
        if self.kind.is_parametric() {
            let r = f.tape.relu(x);
            self.apply_conv(f, r)
        } else {
            self.apply_free(f, x)
        }
    }

    /// Like [`apply`](Self::apply) but reuses `relu_x = relu(x)` for the
    /// convolution operators, which all start with a ReLU.
    pub fn apply_shared(&self, f: &mut Forward, x: Var, relu_x: Var) -> Result<Var> {
        self.check_input(f, x)?;
        if self.kind.is_parametric() {
            self.apply_conv(f, relu_x)
        } else {
            self.apply_free(f, x)
        }
    }

    fn check_input(&self, f: &Forward, x: Var) -> Result<()> {
        let c = f.tape.shape(x).c();
        if c != self.in_channels {
            return Err(dim_err!(
                "{} expects {} input channels, got {c}",
                self.kind,
                self.in_channels
            ));
        }
        Ok(())
    }

    fn apply_free(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let temporal = f.temporal_pools;
        let t = &mut f.tape;
        match self.kind {
            OperatorKind::Zero => Ok(t.constant(Tensor5D::zeros(t.shape(x)))),
            OperatorKind::SkipCon => Ok(x),
            OperatorKind::MPool3 => {
                let s = t.max_pool_spatial(x, 3, 1, 1)?;
                if temporal {
                    t.max_pool_temporal(s, 3, 1, 1)
                } else {
                    Ok(s)
                }
            }
            OperatorKind::APool3 => {
                let s = t.avg_pool_spatial(x, 3, 1, 1)?;
                if temporal {
                    t.avg_pool_temporal(s, 3, 1, 1)
                } else {
                    Ok(s)
                }
            }
            _ => unreachable!("parametric operator"),
        }
    }

    fn apply_conv(&self, f: &mut Forward, mut h: Var) -> Result<Var> {
        for (&w, st) in self.weights.iter().zip(stages(self.kind)) {
            let wv = f.param(w);
            h = f.tape.conv3d(
                h,
                wv,
                crate::kernels::ConvGeom {
                    stride: [1, 1, 1],
                    pad: st.pad,
                    dilation: st.dilation,
                },
            )?;
        }
        let (s, b, n) = self.norm.expect("parametric operator has a norm");
        f.batch_norm(h, s, b, n)
    }
}

/// `sum_j softmax(alpha_row)_j * op_j(x)` over the eight candidates.
pub fn mixed_op(f: &mut Forward, x: Var, alpha_row: Var, ops: &[OperatorInstance]) -> Result<Var> {
    if ops.len() != f.tape.value(alpha_row).len() {
        return Err(dim_err!(
            "mixed_op: {} operators for {} architecture weights",
            ops.len(),
            f.tape.value(alpha_row).len()
        ));
    }
    let weights = f.tape.softmax(alpha_row)?;
    let relu_x = if ops.iter().any(|o| o.kind.is_parametric()) {
        Some(f.tape.relu(x))
    } else {
        None
    };
    let mut terms = Vec::with_capacity(ops.len());
    for op in ops {
        terms.push(match op.kind {
            OperatorKind::Zero => None,
            _ if op.kind.is_parametric() => Some(op.apply_shared(f, x, relu_x.unwrap())?),
            _ => Some(op.apply(f, x)?),
        });
    }
    f.tape.weighted_sum(&terms, weights)
}

/// Creates the eight candidates for one edge, in canonical order.
pub fn candidate_set<R: Rng>(
    channels: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) -> Result<Vec<OperatorInstance>> {
    OperatorKind::ALL
        .iter()
        .map(|&k| OperatorInstance::new(k, channels, channels, store, prefix, rng))
        .collect()
}
