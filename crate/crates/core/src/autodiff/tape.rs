use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::linalg;
use super::tensor::{NodeRef, ParamId, Params, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Recorded operation; payloads hold whatever backward needs beyond the
/// parent values themselves.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    Scale(f64),
    Matmul,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Mean(Option<usize>),
    Sum(Option<usize>),
    Transpose,
    ConcatLastAxis,
    GatherRows(Arc<Vec<usize>>),
    Broadcast,
    /// (m,n) + row vector (n), fused so the broadcast is never materialized.
    AddBias,
    /// All-pairs sum: (n,h) ⊞ (n,h) → (n², h) with out[i·n+j] = a[i] + b[j].
    PairSum,
    LogSumExp(usize),
    Clip { lo: f64, hi: f64 },
    Conv2d { stride: usize, padding: usize },
    Reshape,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
}

/// Primitive kinds accepted by [`Tape::apply_primitive`].
#[derive(Debug, Clone)]
pub enum OpKind {
    Add,
    Subtract,
    Multiply,
    Matmul,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Mean(Option<usize>),
    Sum(Option<usize>),
    Transpose,
    ConcatLastAxis,
    GatherRows(Arc<Vec<usize>>),
    Broadcast(Vec<usize>),
}

/// Append-only gradient tape, rebuilt every iteration (define-by-run).
///
/// Backward traverses nodes in strictly decreasing append order, so the
/// topological order is implicit. Single-threaded by construction; separate
/// runs use separate tapes.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, usize)>,
}

/// Per-node gradients produced by [`Tape::backward`].
///
/// Gradients of interior nodes are released as the sweep passes them; only
/// leaves (parameters, watched inputs) keep theirs.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of a leaf tensor, if any gradient flowed to it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.filter(|n| n.tape_id == self.tape_id)?;
        self.grads[node.index].as_deref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Tensor {
        let value = Arc::new(value);
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            shape: shape.clone(),
            value: Arc::clone(&value),
            requires_grad,
        });
        Tensor::from_shared(
            shape,
            value,
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        )
    }

    /// Enroll a tensor as an untracked constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            requires_grad: false,
        });
        Tensor::from_shared(
            t.shape().to_vec(),
            t.shared_data(),
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        )
    }

    /// Enroll a tensor as a gradient-receiving leaf without a parameter slot.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            requires_grad: true,
        });
        Tensor::from_shared(
            t.shape().to_vec(),
            t.shared_data(),
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        )
    }

    /// Enroll a parameter; its gradient is retrievable via [`Tape::param_grads`].
    pub fn param(&mut self, params: &Params, id: ParamId) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: params.shape(id).to_vec(),
            value: params.shared_value(id),
            requires_grad: true,
        });
        self.param_nodes.push((id, index));
        Tensor::from_shared(
            params.shape(id).to_vec(),
            params.shared_value(id),
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        )
    }

    fn node_of(&self, t: &Tensor, op: &'static str) -> Result<usize> {
        match t.node {
            Some(n) if n.tape_id == self.id => Ok(n.index),
            Some(_) => Err(Error::contract(op, "tensor belongs to a different tape")),
            None => Err(Error::contract(
                op,
                "tensor is not enrolled on the tape (use constant/watch/param)",
            )),
        }
    }

    fn value(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].value
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    // ───── elementwise binary ─────

    fn binary(&mut self, op: Op, name: &'static str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ia, ib) = (self.node_of(a, name)?, self.node_of(b, name)?);
        let out: Vec<f64> = match op {
            Op::Add => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            Op::Sub => a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
            Op::Mul => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let req = self.requires(ia) || self.requires(ib);
        Ok(self.push(op, vec![ia, ib], a.shape().to_vec(), out, req))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Sub, "subtract", a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Op::Mul, "multiply", a, b)
    }

    /// x + c elementwise for a plain constant.
    pub fn add_const(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let i = self.node_of(x, "add_const")?;
        let out = x.data().iter().map(|v| v + c).collect();
        let req = self.requires(i);
        Ok(self.push(Op::AddScalar, vec![i], x.shape().to_vec(), out, req))
    }

    /// c·x elementwise for a plain constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let i = self.node_of(x, "scale")?;
        let out = x.data().iter().map(|v| v * c).collect();
        let req = self.requires(i);
        Ok(self.push(Op::Scale(c), vec![i], x.shape().to_vec(), out, req))
    }

    pub fn neg(&mut self, x: &Tensor) -> Result<Tensor> {
        self.scale(x, -1.0)
    }

    // ───── elementwise unary ─────

    fn unary(&mut self, op: Op, name: &'static str, x: &Tensor) -> Result<Tensor> {
        let i = self.node_of(x, name)?;
        let out: Vec<f64> = match op {
            Op::Relu => x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Op::Exp => x.data().iter().map(|&v| v.exp()).collect(),
            Op::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::domain(
                        "log",
                        format!("log of non-positive value {bad}"),
                    ));
                }
                x.data().iter().map(|&v| v.ln()).collect()
            }
            Op::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            Op::Softplus => x.data().iter().map(|&v| softplus(v)).collect(),
            _ => unreachable!(),
        };
        let req = self.requires(i);
        Ok(self.push(op, vec![i], x.shape().to_vec(), out, req))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Relu, "relu", x)
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, "exp", x)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Log, "log", x)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Sigmoid, "sigmoid", x)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Softplus, "softplus", x)
    }

    /// tanh composed from sigmoid: tanh(x) = 2σ(2x) − 1.
    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let two_x = self.scale(x, 2.0)?;
        let s = self.sigmoid(&two_x)?;
        let two_s = self.scale(&s, 2.0)?;
        self.add_const(&two_s, -1.0)
    }

    /// Elementwise clamp to [lo, hi]; the subgradient at the exact boundary
    /// is taken as 1 for determinism. lo = −∞ / hi = +∞ disable a side.
    pub fn clip(&mut self, x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::contract(
                "clip",
                format!("lower bound {lo} exceeds upper bound {hi}"),
            ));
        }
        let i = self.node_of(x, "clip")?;
        let out = x.data().iter().map(|&v| v.min(hi).max(lo)).collect();
        let req = self.requires(i);
        Ok(self.push(Op::Clip { lo, hi }, vec![i], x.shape().to_vec(), out, req))
    }

    // ───── matrix ops ─────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a, "matmul")?, self.node_of(b, "matmul")?);
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::matmul(m, k, n, a.data(), b.data(), &mut out);
        let req = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::Matmul, vec![ia, ib], vec![m, n], out, req))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let i = self.node_of(x, "transpose")?;
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::contract(
                "transpose",
                format!("expected 2-d tensor, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_buf(x.data(), r, c);
        let req = self.requires(i);
        Ok(self.push(Op::Transpose, vec![i], vec![c, r], out, req))
    }

    pub fn concat_last_axis(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (
            self.node_of(a, "concat_last_axis")?,
            self.node_of(b, "concat_last_axis")?,
        );
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_last_axis",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
        }
        let req = self.requires(ia) || self.requires(ib);
        Ok(self.push(Op::ConcatLastAxis, vec![ia, ib], vec![r, ca + cb], out, req))
    }

    /// Select rows of a 2-d tensor; rows may repeat. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: &Tensor, idx: Arc<Vec<usize>>) -> Result<Tensor> {
        let i = self.node_of(x, "gather_rows")?;
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::contract(
                "gather_rows",
                format!("expected 2-d tensor, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= r) {
            return Err(Error::contract(
                "gather_rows",
                format!("row index {bad} out of bounds for {r} rows"),
            ));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &j in idx.iter() {
            out.extend_from_slice(&x.data()[j * c..(j + 1) * c]);
        }
        let shape = vec![idx.len(), c];
        let req = self.requires(i);
        Ok(self.push(Op::GatherRows(idx), vec![i], shape, out, req))
    }

    /// Expand to `target`: scalar → anything, [n] / [1,n] → [m,n] across rows,
    /// [m,1] → [m,n] across columns. Backward sums over the expanded axes.
    pub fn broadcast(&mut self, x: &Tensor, target: &[usize]) -> Result<Tensor> {
        let i = self.node_of(x, "broadcast")?;
        let s = x.shape();
        let t_len: usize = target.iter().product();
        let out: Vec<f64> = if s == target {
            x.data().to_vec()
        } else if x.len() == 1 {
            vec![x.data()[0]; t_len]
        } else if target.len() == 2 && (s == [target[1]] || s == [1, target[1]]) {
            let mut out = Vec::with_capacity(t_len);
            for _ in 0..target[0] {
                out.extend_from_slice(x.data());
            }
            out
        } else if target.len() == 2 && s == [target[0], 1] {
            let mut out = Vec::with_capacity(t_len);
            for r in 0..target[0] {
                out.extend(std::iter::repeat(x.data()[r]).take(target[1]));
            }
            out
        } else {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: s.to_vec(),
                rhs: target.to_vec(),
            });
        };
        let req = self.requires(i);
        Ok(self.push(Op::Broadcast, vec![i], target.to_vec(), out, req))
    }

    /// add with a row-vector bias broadcast over rows.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let b = self.broadcast(bias, x.shape())?;
        self.add(x, &b)
    }

    /// Reinterpret the buffer with a new shape of identical element count;
    /// shares the underlying storage.
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let i = self.node_of(x, "reshape")?;
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let req = self.requires(i);
        let value = x.shared_data();
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Reshape,
            inputs: vec![i],
            shape: shape.clone(),
            value: Arc::clone(&value),
            requires_grad: req,
        });
        Ok(Tensor::from_shared(
            shape,
            value,
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
        ))
    }

    // ───── reductions ─────

    fn reduction(
        &mut self,
        op: Op,
        name: &'static str,
        x: &Tensor,
        axis: Option<usize>,
    ) -> Result<Tensor> {
        let i = self.node_of(x, name)?;
        let s = x.shape();
        let (shape, out): (Vec<usize>, Vec<f64>) = match axis {
            None => (vec![1], vec![x.data().iter().sum()]),
            Some(ax) => {
                if ax >= s.len() {
                    return Err(Error::contract(
                        name,
                        format!("axis {ax} out of range for shape {s:?}"),
                    ));
                }
                if s.len() == 1 {
                    (vec![1], vec![x.data().iter().sum()])
                } else if s.len() == 2 {
                    let (r, c) = (s[0], s[1]);
                    if ax == 0 {
                        let mut out = vec![0.0; c];
                        for row in 0..r {
                            for (o, v) in out.iter_mut().zip(&x.data()[row * c..(row + 1) * c]) {
                                *o += v;
                            }
                        }
                        (vec![c], out)
                    } else {
                        let out = (0..r)
                            .map(|row| x.data()[row * c..(row + 1) * c].iter().sum())
                            .collect();
                        (vec![r], out)
                    }
                } else {
                    return Err(Error::contract(
                        name,
                        format!("axis reductions support 1-d/2-d tensors, got {s:?}"),
                    ));
                }
            }
        };
        let count = reduced_count(s, axis);
        let out = match op {
            Op::Sum(_) => out,
            Op::Mean(_) => out.iter().map(|v| v / count as f64).collect(),
            _ => unreachable!(),
        };
        let req = self.requires(i);
        Ok(self.push(op, vec![i], shape, out, req))
    }

    pub fn sum(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduction(Op::Sum(axis), "sum", x, axis)
    }

    pub fn mean(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduction(Op::Mean(axis), "mean", x, axis)
    }

    /// Max-shifted log-sum-exp along `axis` of a 1-d or 2-d tensor; finite
    /// output for any finite input.
    pub fn logsumexp(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let i = self.node_of(x, "logsumexp")?;
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::contract(
                "logsumexp",
                format!("reduction axis {axis} invalid for shape {s:?}"),
            ));
        }
        let (shape, out): (Vec<usize>, Vec<f64>) = if s.len() == 1 {
            (vec![1], vec![logsumexp_slice(x.data())])
        } else if s.len() == 2 {
            let (r, c) = (s[0], s[1]);
            if axis == 1 {
                (
                    vec![r],
                    (0..r)
                        .map(|row| logsumexp_slice(&x.data()[row * c..(row + 1) * c]))
                        .collect(),
                )
            } else {
                let col: Vec<f64> = (0..c)
                    .map(|j| {
                        let it: Vec<f64> = (0..r).map(|row| x.data()[row * c + j]).collect();
                        logsumexp_slice(&it)
                    })
                    .collect();
                (vec![c], col)
            }
        } else {
            return Err(Error::contract(
                "logsumexp",
                format!("supports 1-d/2-d tensors, got {s:?}"),
            ));
        };
        let req = self.requires(i);
        Ok(self.push(Op::LogSumExp(axis), vec![i], shape, out, req))
    }

    // ───── convolution ─────

    /// 2-d cross-correlation of an NCHW input with an OIKK kernel, lowered to
    /// GEMM through an explicit patch matrix. Patches are rebuilt in chunks
    /// during backward instead of being saved.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (ii, ik) = (self.node_of(input, "conv2d")?, self.node_of(kernel, "conv2d")?);
        let geom = ConvGeom::validate(input.shape(), kernel.shape(), stride, padding)?;
        let out = conv_forward(input.data(), kernel.data(), &geom);
        let shape = vec![geom.n, geom.o, geom.oh, geom.ow];
        let req = self.requires(ii) || self.requires(ik);
        Ok(self.push(Op::Conv2d { stride, padding }, vec![ii, ik], shape, out, req))
    }

    // ───── generic dispatcher ─────

    /// Apply a primitive by kind; the uniform entry point used by the
    /// gradient-check battery.
    pub fn apply_primitive(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::contract(
                    "apply_primitive",
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Subtract => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Multiply => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Softplus => {
                arity(1)?;
                self.softplus(inputs[0])
            }
            OpKind::Mean(axis) => {
                arity(1)?;
                self.mean(inputs[0], axis)
            }
            OpKind::Sum(axis) => {
                arity(1)?;
                self.sum(inputs[0], axis)
            }
            OpKind::Transpose => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            OpKind::ConcatLastAxis => {
                arity(2)?;
                self.concat_last_axis(inputs[0], inputs[1])
            }
            OpKind::GatherRows(idx) => {
                arity(1)?;
                self.gather_rows(inputs[0], idx)
            }
            OpKind::Broadcast(target) => {
                arity(1)?;
                self.broadcast(inputs[0], &target)
            }
        }
    }

    // ───── backward ─────

    /// Reverse sweep from a scalar root. Gradients sum over all use sites of
    /// a node; a node used k times accumulates k contributions.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_idx = self.node_of(root, "backward")?;
        if root.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root_idx] = Some(vec![1.0]);

        for i in (0..=root_idx).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            let g = if is_leaf {
                continue; // leaves keep their gradient for retrieval
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_node(i, &g, &mut grads);
        }

        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }

    /// Gradients for every parameter enrolled on this tape, indexed like the
    /// arena. Parameters enrolled more than once have their contributions
    /// summed; untouched parameters get `None`.
    pub fn param_grads(&self, grads: &Gradients, params: &Params) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = (0..params.len()).map(|_| None).collect();
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = grads.grads[node].as_ref() {
                match &mut out[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }

    fn accum(
        grads: &mut [Option<Vec<f64>>],
        idx: usize,
        len: usize,
        f: impl FnOnce(&mut [f64]),
    ) {
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &p in inputs {
                    if self.requires(p) {
                        Self::accum(grads, p, g.len(), |acc| {
                            for (a, &gv) in acc.iter_mut().zip(g) {
                                *a += gv;
                            }
                        });
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires(a) {
                    Self::accum(grads, a, g.len(), |acc| {
                        for (x, &gv) in acc.iter_mut().zip(g) {
                            *x += gv;
                        }
                    });
                }
                if self.requires(b) {
                    Self::accum(grads, b, g.len(), |acc| {
                        for (x, &gv) in acc.iter_mut().zip(g) {
                            *x -= gv;
                        }
                    });
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires(a) {
                    let bv = self.value(b);
                    Self::accum(grads, a, g.len(), |acc| {
                        for ((x, &gv), &y) in acc.iter_mut().zip(g).zip(bv) {
                            *x += gv * y;
                        }
                    });
                }
                if self.requires(b) {
                    let av = self.value(a);
                    Self::accum(grads, b, g.len(), |acc| {
                        for ((x, &gv), &y) in acc.iter_mut().zip(g).zip(av) {
                            *x += gv * y;
                        }
                    });
                }
            }
            Op::AddScalar => {
                let p = inputs[0];
                Self::accum(grads, p, g.len(), |acc| {
                    for (x, &gv) in acc.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }
            Op::Scale(c) => {
                let p = inputs[0];
                let c = *c;
                Self::accum(grads, p, g.len(), |acc| {
                    for (x, &gv) in acc.iter_mut().zip(g) {
                        *x += gv * c;
                    }
                });
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.requires(a) {
                    let bv = self.value(b);
                    Self::accum(grads, a, m * k, |acc| {
                        linalg::matmul_a_bt_accum(m, n, k, g, bv, acc);
                    });
                }
                if self.requires(b) {
                    let av = self.value(a);
                    Self::accum(grads, b, k * n, |acc| {
                        linalg::matmul_at_b_accum(k, m, n, av, g, acc);
                    });
                }
            }
            Op::Relu => {
                let p = inputs[0];
                let xv = self.value(p);
                Self::accum(grads, p, g.len(), |acc| {
                    for ((a, &gv), &x) in acc.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Exp => {
                let p = inputs[0];
                let out = self.value(i);
                Self::accum(grads, p, g.len(), |acc| {
                    for ((a, &gv), &o) in acc.iter_mut().zip(g).zip(out) {
                        *a += gv * o;
                    }
                });
            }
            Op::Log => {
                let p = inputs[0];
                let xv = self.value(p);
                Self::accum(grads, p, g.len(), |acc| {
                    for ((a, &gv), &x) in acc.iter_mut().zip(g).zip(xv) {
                        *a += gv / x;
                    }
                });
            }
            Op::Sigmoid => {
                let p = inputs[0];
                let out = self.value(i);
                Self::accum(grads, p, g.len(), |acc| {
                    for ((a, &gv), &o) in acc.iter_mut().zip(g).zip(out) {
                        *a += gv * o * (1.0 - o);
                    }
                });
            }
            Op::Softplus => {
                let p = inputs[0];
                let xv = self.value(p);
                Self::accum(grads, p, g.len(), |acc| {
                    for ((a, &gv), &x) in acc.iter_mut().zip(g).zip(xv) {
                        *a += gv * sigmoid(x);
                    }
                });
            }
            Op::Mean(axis) | Op::Sum(axis) => {
                let p = inputs[0];
                let s = &self.nodes[p].shape;
                let count = reduced_count(s, *axis);
                let w = if matches!(node.op, Op::Mean(_)) {
                    1.0 / count as f64
                } else {
                    1.0
                };
                let total = self.value(p).len();
                match (axis, s.len()) {
                    (None, _) | (Some(_), 1) => {
                        let gv = g[0] * w;
                        Self::accum(grads, p, total, |acc| {
                            for a in acc.iter_mut() {
                                *a += gv;
                            }
                        });
                    }
                    (Some(0), 2) => {
                        let (r, c) = (s[0], s[1]);
                        Self::accum(grads, p, total, |acc| {
                            for row in 0..r {
                                for (a, &gv) in acc[row * c..(row + 1) * c].iter_mut().zip(g) {
                                    *a += gv * w;
                                }
                            }
                        });
                    }
                    (Some(1), 2) => {
                        let (r, c) = (s[0], s[1]);
                        Self::accum(grads, p, total, |acc| {
                            for row in 0..r {
                                let gv = g[row] * w;
                                for a in acc[row * c..(row + 1) * c].iter_mut() {
                                    *a += gv;
                                }
                            }
                        });
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::Transpose => {
                let p = inputs[0];
                let s = &self.nodes[p].shape;
                let (r, c) = (s[0], s[1]);
                Self::accum(grads, p, r * c, |acc| {
                    for row in 0..r {
                        for col in 0..c {
                            acc[row * c + col] += g[col * r + row];
                        }
                    }
                });
            }
            Op::ConcatLastAxis => {
                let (a, b) = (inputs[0], inputs[1]);
                let (r, ca) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let cb = self.nodes[b].shape[1];
                let ct = ca + cb;
                if self.requires(a) {
                    Self::accum(grads, a, r * ca, |acc| {
                        for row in 0..r {
                            for col in 0..ca {
                                acc[row * ca + col] += g[row * ct + col];
                            }
                        }
                    });
                }
                if self.requires(b) {
                    Self::accum(grads, b, r * cb, |acc| {
                        for row in 0..r {
                            for col in 0..cb {
                                acc[row * cb + col] += g[row * ct + ca + col];
                            }
                        }
                    });
                }
            }
            Op::GatherRows(idx) => {
                let p = inputs[0];
                let c = self.nodes[p].shape[1];
                let total = self.value(p).len();
                Self::accum(grads, p, total, |acc| {
                    for (r_out, &r_in) in idx.iter().enumerate() {
                        for col in 0..c {
                            acc[r_in * c + col] += g[r_out * c + col];
                        }
                    }
                });
            }
            Op::Broadcast => {
                let p = inputs[0];
                let from = &self.nodes[p].shape;
                let to = &node.shape;
                let total = self.value(p).len();
                Self::accum(grads, p, total, |acc| {
                    if total == 1 {
                        acc[0] += g.iter().sum::<f64>();
                    } else if to.len() == 2 && (from == &[to[1]] || from == &[1, to[1]]) {
                        let (r, c) = (to[0], to[1]);
                        for row in 0..r {
                            for (a, &gv) in acc.iter_mut().zip(&g[row * c..(row + 1) * c]) {
                                *a += gv;
                            }
                        }
                    } else if to.len() == 2 && from == &[to[0], 1] {
                        let (r, c) = (to[0], to[1]);
                        for row in 0..r {
                            acc[row] += g[row * c..(row + 1) * c].iter().sum::<f64>();
                        }
                    } else {
                        // forward validated from == to
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a += gv;
                        }
                    }
                });
            }
            Op::LogSumExp(axis) => {
                let p = inputs[0];
                let s = &self.nodes[p].shape;
                let xv = self.value(p);
                let out = self.value(i);
                let total = xv.len();
                if s.len() == 1 {
                    let lse = out[0];
                    Self::accum(grads, p, total, |acc| {
                        for (a, &x) in acc.iter_mut().zip(xv) {
                            *a += g[0] * (x - lse).exp();
                        }
                    });
                } else {
                    let (r, c) = (s[0], s[1]);
                    if *axis == 1 {
                        Self::accum(grads, p, total, |acc| {
                            for row in 0..r {
                                let lse = out[row];
                                let gv = g[row];
                                for col in 0..c {
                                    acc[row * c + col] += gv * (xv[row * c + col] - lse).exp();
                                }
                            }
                        });
                    } else {
                        Self::accum(grads, p, total, |acc| {
                            for row in 0..r {
                                for col in 0..c {
                                    acc[row * c + col] +=
                                        g[col] * (xv[row * c + col] - out[col]).exp();
                                }
                            }
                        });
                    }
                }
            }
            Op::Clip { lo, hi } => {
                let p = inputs[0];
                let xv = self.value(p);
                let (lo, hi) = (*lo, *hi);
                Self::accum(grads, p, g.len(), |acc| {
                    for ((a, &gv), &x) in acc.iter_mut().zip(g).zip(xv) {
                        if x >= lo && x <= hi {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Conv2d { stride, padding } => {
                let (ii, ik) = (inputs[0], inputs[1]);
                let geom = ConvGeom::validate(
                    &self.nodes[ii].shape,
                    &self.nodes[ik].shape,
                    *stride,
                    *padding,
                )
                .expect("validated in forward");
                let input = self.value(ii).to_vec();
                let kernel = self.value(ik).to_vec();
                if self.requires(ik) {
                    Self::accum(grads, ik, kernel.len(), |acc| {
                        conv_backward_kernel(&input, g, &geom, acc);
                    });
                }
                if self.requires(ii) {
                    Self::accum(grads, ii, input.len(), |acc| {
                        conv_backward_input(&kernel, g, &geom, acc);
                    });
                }
            }
            Op::Reshape => {
                let p = inputs[0];
                Self::accum(grads, p, g.len(), |acc| {
                    for (a, &gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn transpose_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn reduced_count(shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => shape.iter().product(),
        Some(ax) => {
            if shape.len() == 1 {
                shape[0]
            } else {
                shape[ax]
            }
        }
    }
}

// ───── convolution internals ─────

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn validate(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeom> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, i, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != i {
            return Err(Error::contract(
                "conv2d",
                format!("input has {c} channels but kernel expects {i}"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "spatial dims {h}x{w} with padding {padding} smaller than kernel {kh}x{kw}"
                ),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch_cols(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Batch chunk size keeping the patch matrix under ~64 MB.
    fn chunk(&self) -> usize {
        let per_image = self.oh * self.ow * self.patch_cols();
        (8_000_000 / per_image.max(1)).clamp(1, self.n)
    }
}

/// Fill `patches` (rows = chunk·OH·OW, cols = C·KH·KW) for images [n0, n1).
fn im2col(input: &[f64], geom: &ConvGeom, n0: usize, n1: usize, patches: &mut [f64]) {
    let ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
        ..
    } = *geom;
    let cols = geom.patch_cols();
    patches.fill(0.0);
    for n in n0..n1 {
        let img = &input[n * c * h * w..(n + 1) * c * h * w];
        let base_row = (n - n0) * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = base_row + oy * ow + ox;
                let dst = &mut patches[row * cols..(row + 1) * cols];
                for ch in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[ch * kh * kw + ky * kw + kx] =
                                img[ch * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(input: &[f64], kernel: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (n, o, oh, ow) = (geom.n, geom.o, geom.oh, geom.ow);
    let cols = geom.patch_cols();
    let chunk = geom.chunk();
    let mut out = vec![0.0; n * o * oh * ow];
    let mut patches = vec![0.0; chunk * oh * ow * cols];
    let mut gemm_out = vec![0.0; chunk * oh * ow * o];
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let rows = (n1 - n0) * oh * ow;
        im2col(input, geom, n0, n1, &mut patches[..rows * cols]);
        gemm_out[..rows * o].fill(0.0);
        // patches (rows × cols) · kernelᵀ with kernel stored (O × cols)
        linalg::matmul_a_bt_accum(rows, cols, o, &patches[..rows * cols], kernel, &mut gemm_out[..rows * o]);
        // permute (n, oy·ox, o) → (n, o, oy·ox)
        let p = oh * ow;
        for nn in n0..n1 {
            let local = nn - n0;
            for pos in 0..p {
                let src = (local * p + pos) * o;
                for ch in 0..o {
                    out[nn * o * p + ch * p + pos] = gemm_out[src + ch];
                }
            }
        }
        n0 = n1;
    }
    out
}

/// dKernel += Σ patchesᵀ-weighted upstream gradients.
fn conv_backward_kernel(input: &[f64], g: &[f64], geom: &ConvGeom, dk: &mut [f64]) {
    let (n, o, oh, ow) = (geom.n, geom.o, geom.oh, geom.ow);
    let cols = geom.patch_cols();
    let chunk = geom.chunk();
    let p = oh * ow;
    let mut patches = vec![0.0; chunk * p * cols];
    let mut g_mat = vec![0.0; chunk * p * o];
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let rows = (n1 - n0) * p;
        im2col(input, geom, n0, n1, &mut patches[..rows * cols]);
        for nn in n0..n1 {
            let local = nn - n0;
            for pos in 0..p {
                for ch in 0..o {
                    g_mat[(local * p + pos) * o + ch] = g[nn * o * p + ch * p + pos];
                }
            }
        }
        // dK (o × cols) += g_matᵀ (o × rows) · patches (rows × cols)
        linalg::matmul_at_b_accum(o, rows, cols, &g_mat[..rows * o], &patches[..rows * cols], dk);
        n0 = n1;
    }
}

/// dInput += col2im(g · kernel).
fn conv_backward_input(kernel: &[f64], g: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
    } = *geom;
    let cols = geom.patch_cols();
    let chunk = geom.chunk();
    let p = oh * ow;
    let mut g_mat = vec![0.0; chunk * p * o];
    let mut d_patches = vec![0.0; chunk * p * cols];
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let rows = (n1 - n0) * p;
        for nn in n0..n1 {
            let local = nn - n0;
            for pos in 0..p {
                for ch in 0..o {
                    g_mat[(local * p + pos) * o + ch] = g[nn * o * p + ch * p + pos];
                }
            }
        }
        d_patches[..rows * cols].fill(0.0);
        // dPatches (rows × cols) = g_mat (rows × o) · kernel (o × cols)
        linalg::matmul(rows, o, cols, &g_mat[..rows * o], kernel, &mut d_patches[..rows * cols]);
        // col2im scatter
        for nn in n0..n1 {
            let local = nn - n0;
            let img = &mut dx[nn * c * h * w..(nn + 1) * c * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = local * p + oy * ow + ox;
                    let src = &d_patches[row * cols..(row + 1) * cols];
                    for ch in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                img[ch * h * w + iy as usize * w + ix as usize] +=
                                    src[ch * kh * kw + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
        n0 = n1;
    }
}
