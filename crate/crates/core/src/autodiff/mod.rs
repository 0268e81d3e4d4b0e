//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! whose parents are already on the tape, so node order is a topological order
//! and [`Tape::backward`] is a single reverse sweep. Values that fan out receive
//! the sum of their downstream gradients.
//!
//! The tape also tallies multiply-accumulates for the matrix-shaped operations
//! under a caller-chosen scope label; the cost model is checked against it.

mod grad;
mod ops;

pub use ops::{sigmoid, softplus, zoh_phi};

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Abs(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Transpose12(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows {
        x: Var,
        index: Rc<[Option<usize>]>,
    },
    ScatterAddRows {
        x: Var,
        index: Rc<[Option<usize>]>,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    RowNorm(Var),
    DistanceBias {
        scores: Var,
        gamma: Var,
        dist: Rc<Tensor>,
        sign: f64,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    ZohA {
        a: Var,
        delta: Var,
    },
    ZohB {
        a: Var,
        b: Var,
        delta: Var,
    },
    Scan {
        x: Var,
        abar: Var,
        bbar: Var,
        c: Var,
        states: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Silu(..) => "silu",
            Op::Abs(..) => "abs",
            Op::Powf(..) => "powf",
            Op::Clamp(..) => "clamp",
            Op::Matmul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Transpose12(..) => "transpose12",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RowNorm(..) => "row_norm",
            Op::DistanceBias { .. } => "distance_bias",
            Op::CausalConv { .. } => "causal_conv",
            Op::ZohA { .. } => "zoh_a",
            Op::ZohB { .. } => "zoh_b",
            Op::Scan { .. } => "selective_scan",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant | Op::Detach => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Neg(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Silu(x)
            | Op::Abs(x)
            | Op::Powf(x, _)
            | Op::Clamp(x, _, _)
            | Op::Reshape(x)
            | Op::Transpose12(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::Mean(x)
            | Op::RowNorm(x) => vec![*x],
            Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::DistanceBias { scores, gamma, .. } => vec![*scores, *gamma],
            Op::CausalConv { x, w, b } => vec![*x, *w, *b],
            Op::ZohA { a, delta } => vec![*a, *delta],
            Op::ZohB { a, b, delta } => vec![*a, *b, *delta],
            Op::Scan { x, abar, bbar, c, .. } => vec![*x, *abar, *bbar, *c],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    scope: Option<&'static str>,
    macs: BTreeMap<&'static str, u64>,
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

    /// Bytes held by recorded values (saved backward context excluded).
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel() * std::mem::size_of::<f64>()).sum()
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Constant, false)
    }

    /// Copies `x` into a new node that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_node(value, Op::Detach, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Label subsequent matrix-shaped operations for MAC accounting.
    pub fn set_scope(&mut self, scope: Option<&'static str>) {
        self.scope = scope;
    }

    /// Multiply-accumulates per scope label recorded so far.
    pub fn mac_counts(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    pub(crate) fn count_macs(&mut self, macs: u64) {
        if let Some(scope) = self.scope {
            *self.macs.entry(scope).or_insert(0) += macs;
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a derived node after checking its value is finite.
    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited at most once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            grad::propagate(self, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().clone(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    pub(crate) fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }
}

/// Gradients of a scalar loss with respect to every node it reached.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like its value when the loss did not reach it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let shape = tape.value(v).shape().clone();
                let n = shape.numel();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }
}
