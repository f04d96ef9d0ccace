//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value. `backward`
//! walks the nodes in exact reverse order and accumulates vector-Jacobian
//! products additively, so a value consumed k times receives k contributions.

mod attention;
mod conv;
mod gradcheck;
pub(crate) mod ops;

pub use attention::{attention, multi_head_attention};
pub use gradcheck::{gradcheck, gradcheck_with, GradLocation, GradcheckOptions, GradcheckError, GradcheckReport, Stencil, REL_ERROR_FLOOR};

use crate::tensor::{self, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied op: receives the input
/// values, the output value and the output gradient; returns one gradient
/// buffer per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv3d(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::VarAxis(..) => "var_axis",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Conv3d(..) => "conv3d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of executed ops. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Leaf that receives gradients.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation (also used as stop-gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `x` into a fresh constant leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Registers an op whose backward is supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(value, Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        })
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let value = value.check_finite(op.name())?;
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) | Op::Conv3d(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::ClampMin(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::BroadcastTo(x)
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::MeanAxis(x, _)
            | Op::VarAxis(x, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Slice { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Order in which `backward` will visit recorded ops (op names, newest first).
    pub fn backward_order(&self) -> Vec<&'static str> {
        self.nodes.iter().rev().map(|n| n.op.name()).collect()
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!("loss must be a single element, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if let Some(idx) = tensor::first_non_finite(&g) {
                return Err(TensorError::NonFinite {
                    op: "backward",
                    index: idx,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                tensor::gemm(m, n, k, 1.0, g, false, bv.data(), true, 0.0, &mut da);
                tensor::gemm(k, m, n, 1.0, av.data(), true, g, false, 0.0, &mut db);
                vec![(*a, da), (*b, db)]
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let ga = &g[i * m * n..(i + 1) * m * n];
                    let ab = &av.data()[i * m * k..(i + 1) * m * k];
                    let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                    tensor::gemm(m, n, k, 1.0, ga, false, bb, true, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                    tensor::gemm(k, m, n, 1.0, ab, true, ga, false, 0.0, &mut db[i * k * n..(i + 1) * k * n]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Gelu(x) => vec![(
                *x,
                g.iter().zip(val(x).data()).map(|(g, &x)| g * ops::gelu_grad(x)).collect(),
            )],
            Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
            Op::Log(x) => vec![(*x, g.iter().zip(val(x).data()).map(|(g, x)| g / x).collect())],
            Op::Sqrt(x) => vec![(*x, g.iter().zip(out.data()).map(|(g, y)| 0.5 * g / y).collect())],
            Op::ClampMin(x, c) => vec![(
                *x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(g, &x)| if x > *c { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, d) = tensor::permute_data(g, out.shape(), &inv).expect("valid inverse permutation");
                vec![(*x, d)]
            }
            Op::BroadcastTo(x) => {
                let src = val(x);
                let idx = tensor::broadcast_index(src.shape(), out.shape()).expect("recorded broadcast");
                let mut d = vec![0.0; src.len()];
                for (gi, &si) in g.iter().zip(&idx) {
                    d[si] += gi;
                }
                vec![(*x, d)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(x).len()])],
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let xv = val(x);
                let (outer, n, inner) = tensor::axis_split(xv.shape(), *axis, "sum_axis").expect("recorded axis");
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            d[(o * n + a) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::VarAxis(x, axis) => {
                let xv = val(x);
                let (outer, n, inner) = tensor::axis_split(xv.shape(), *axis, "var_axis").expect("recorded axis");
                let xd = xv.data();
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mean = (0..n).map(|a| xd[(o * n + a) * inner + i]).sum::<f64>() / n as f64;
                        for a in 0..n {
                            let j = (o * n + a) * inner + i;
                            d[j] = g[o * inner + i] * 2.0 * (xd[j] - mean) / n as f64;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = tensor::axis_split(out.shape(), *axis, "softmax").expect("recorded axis");
                let y = out.data();
                let log = matches!(node.op, Op::LogSoftmax(..));
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|a| g[at(a)]).sum();
                            for a in 0..n {
                                d[at(a)] = g[at(a)] - y[at(a)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..n {
                                d[at(a)] = y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Slice { x, axis, start } => {
                let xv = val(x);
                let (outer, n, inner) = tensor::axis_split(xv.shape(), *axis, "slice").expect("recorded axis");
                let len = out.shape()[*axis];
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(src);
                }
                vec![(*x, d)]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = tensor::axis_split(out.shape(), *axis, "concat").expect("recorded axis");
                let mut offset = 0;
                xs.iter()
                    .map(|x| {
                        let len = val(x).shape()[*axis];
                        let mut d = Vec::with_capacity(val(x).len());
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        offset += len;
                        (*x, d)
                    })
                    .collect()
            }
            Op::Conv3d(x, w) => {
                let (dx, dw) = conv::conv3d_backward(val(x), val(w), g);
                vec![(*x, dx), (*w, dw)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = *out.shape().last().unwrap();
                let rows = out.len() / dim;
                let gam = val(gamma).data();
                let mut dx = vec![0.0; out.len()];
                let mut dg = vec![0.0; dim];
                let mut db = vec![0.0; dim];
                for r in 0..rows {
                    let s = r * dim;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..dim {
                        let dxh = g[s + j] * gam[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[s + j];
                        dg[j] += g[s + j] * xhat[s + j];
                        db[j] += g[s + j];
                    }
                    mean_dxhat /= dim as f64;
                    mean_dxhat_xhat /= dim as f64;
                    for j in 0..dim {
                        let dxh = g[s + j] * gam[j];
                        dx[s + j] = rstd[r] * (dxh - mean_dxhat - xhat[s + j] * mean_dxhat_xhat);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                inputs.iter().copied().zip(backward(&ins, out, g)).collect()
            }
        }
    }
}

/// Result of a reverse sweep. Gradients are kept for every node that
/// requires them, keyed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, tape: &Tape, x: Var) -> Option<Tensor> {
        self.grads
            .get(x.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(tape.shape(x), g.clone()).expect("gradient matches value shape"))
    }

    /// Gradient of `x`, or zeros when `x` did not influence the loss.
    pub fn wrt(&self, tape: &Tape, x: Var) -> Tensor {
        self.get(tape, x).unwrap_or_else(|| Tensor::zeros(tape.shape(x)))
    }

    pub fn raw(&self, x: Var) -> Option<&[f64]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }
}
