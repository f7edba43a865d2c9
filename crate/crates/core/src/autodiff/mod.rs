//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied during a forward pass as a
//! node holding its output value and whatever it needs to run backwards.
//! Nodes are appended in evaluation order, so the tape is always a DAG in
//! topological order and [`Tape::backward`] walks it once, last to first.
//!
//! Leaves come in three kinds: network inputs ([`Tape::input`]), parameters
//! ([`Tape::param`], identified by [`ParamId`]) and constants. A backward
//! pass only computes gradients along paths that reach a requested leaf
//! kind, so asking for input gradients alone skips all weight-gradient work.

mod backward;
mod kernels;
mod ops;

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use kernels::{argmax, log_softmax_row, softmax_row, ConvGeometry};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a parameter tensor within a network's parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Operation kinds the engine records. Used for diagnostics and the op catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Constant,
    Conv2d,
    Linear,
    Add,
    Mul,
    Scale,
    AddScalar,
    Square,
    Exp,
    Log,
    Relu,
    Abs,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    BatchNorm,
    Reshape,
    L2Normalize,
    MatMulNt,
    Angle,
    Cos,
    Softmax,
    LogSoftmax,
    RowMax,
    RowMean,
    ChannelMax,
    Sum,
    Mean,
    MarginLogits,
    CrossEntropy,
    UniformCrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Constant => "constant",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Square => "square",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Reshape => "reshape",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Angle => "angle",
            OpKind::Cos => "cos",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::RowMax => "row_max",
            OpKind::RowMean => "row_mean",
            OpKind::ChannelMax => "channel_max",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MarginLogits => "margin_logits",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::UniformCrossEntropy => "uniform_cross_entropy",
        };
        f.write_str(name)
    }
}

/// Every differentiable operation the engine provides.
pub fn required_op_set() -> Vec<OpKind> {
    use OpKind::*;
    vec![
        Conv2d,
        Linear,
        Add,
        Mul,
        Scale,
        AddScalar,
        Square,
        Exp,
        Log,
        Relu,
        Abs,
        MaxPool2d,
        AvgPool2d,
        GlobalAvgPool,
        BatchNorm,
        Reshape,
        L2Normalize,
        MatMulNt,
        Angle,
        Cos,
        Softmax,
        LogSoftmax,
        RowMax,
        RowMean,
        ChannelMax,
        Sum,
        Mean,
        MarginLogits,
        CrossEntropy,
        UniformCrossEntropy,
    ]
}

/// Clamp applied to cosines before `acos` so the derivative stays finite.
pub const ACOS_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Input,
    Param(ParamId),
    Constant,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        size: usize,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    MatMulNt(Var, Var),
    Angle {
        x: Var,
        deriv: Vec<T>,
    },
    Cos(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    RowMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MarginLogits {
        cos: Var,
        deriv: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    UniformCrossEntropy {
        logits: Var,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Square(_) => OpKind::Square,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Reshape(_) => OpKind::Reshape,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Angle { .. } => OpKind::Angle,
            Op::Cos(_) => OpKind::Cos,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::RowMax { .. } => OpKind::RowMax,
            Op::RowMean(_) => OpKind::RowMean,
            Op::ChannelMax { .. } => OpKind::ChannelMax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MarginLogits { .. } => OpKind::MarginLogits,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::UniformCrossEntropy { .. } => OpKind::UniformCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMulNt(a, b) => vec![*a, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Square(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x)
            | Op::Cos(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::RowMean(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::MaxPool2d { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Angle { x, .. }
            | Op::RowMax { x, .. }
            | Op::ChannelMax { x, .. } => vec![*x],
            Op::MarginLogits { cos, .. } => vec![*cos],
            Op::CrossEntropy { logits, .. } | Op::UniformCrossEntropy { logits, .. } => {
                vec![*logits]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
}

/// Which leaf kinds a backward pass should produce gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub params: bool,
    pub input: bool,
}

impl Targets {
    pub const PARAMS: Targets = Targets {
        params: true,
        input: false,
    };
    pub const INPUT: Targets = Targets {
        params: false,
        input: true,
    };
    pub const ALL: Targets = Targets {
        params: true,
        input: true,
    };
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct GradientBundle<T> {
    pub params: BTreeMap<ParamId, Tensor<T>>,
    pub inputs: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> GradientBundle<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to the first input leaf recorded on the tape.
    pub fn input(&self) -> Option<&Tensor<T>> {
        self.inputs.values().next()
    }

    pub fn input_of(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }
}

/// Record of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a network input whose gradient can be requested.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(Op::Param(id), value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value)
    }

    /// Propagates d(objective)/d(node) back to the requested leaves.
    pub fn backward(&self, objective: Var, targets: Targets) -> Result<GradientBundle<T>> {
        backward::run(self, objective, targets)
    }
}

pub(crate) fn expect_rank<T: Scalar>(
    op: &'static str,
    t: &Tensor<T>,
    rank: usize,
) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, found shape {:?}", t.shape()),
        ));
    }
    Ok(())
}
