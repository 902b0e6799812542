//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] records every primitive as a node holding its operator, parent
//! ids and forward value. [`Tape::backward`] walks the list in reverse,
//! seeding the (scalar) root with 1 and accumulating vector-Jacobian products
//! into each `requires_grad` node. Gradients of `requires_grad` leaves that
//! the root never touched come back as zero tensors, so optimizer loops can
//! iterate a fixed parameter list without special cases.
//!
//! The primitive set is closed: everything differentiable in the engine is
//! built from the methods below, and each one has a finite-difference test.
//! Two guard rails run on every recorded op: exact shape agreement (no
//! broadcasting beyond scalar-tensor ops) and a NaN/Inf scan of the output.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a specific tape. Ids from one tape must not be used
/// with another; node lookups panic on out-of-range ids since that is a
/// programming error rather than a data error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Conv3x3 {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Upsample2x(NodeId),
    Avgpool2x(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    },
    Silu(NodeId),
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis {
        input: NodeId,
        axis: usize,
    },
    Gather {
        input: NodeId,
        axis: usize,
        indices: Vec<usize>,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Upsample2x(a)
            | Op::Avgpool2x(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Silu(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::SumAxis { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::Conv3x3 {
                input,
                weight,
                bias,
            } => {
                let mut p = vec![*input, *weight];
                if let Some(b) = bias {
                    p.push(*b);
                }
                p
            }
            Op::Concat(parts) => parts.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::GroupNorm {
                input,
                gamma,
                beta,
                ..
            } => vec![*input, *gamma, *beta],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Upsample2x(..) => "upsample2x",
            Op::Avgpool2x(..) => "avgpool2x",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Embedding { .. } => "embedding",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient map produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to the given node, if that node
    /// required gradients.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out of the map (useful in optimizer loops).
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Recording tape. See the module docs for the overall contract.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that tracks gradients for nodes created via [`Tape::param`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// An evaluation-only tape: `param` behaves like `leaf` and `backward`
    /// is unavailable. Samplers run on no-grad tapes; this is also the only
    /// mode in which attention interventions are legal.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── node construction ───────────────────────────────────────────────────

    /// Constant input: participates in forward values only.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, false)
    }

    /// Differentiable input. On a no-grad tape this silently degrades to a
    /// constant so model code can run unchanged in evaluation mode.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let rg = self.grad_enabled;
        self.push_unchecked(Op::Leaf, value, rg)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    /// Records `op` with the finished forward `value`, running the NaN/Inf
    /// guard and deriving `requires_grad` from the parents.
    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(op, value, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise primitives ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        self.push(Op::Div(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        self.push(Op::AddScalar(a), value)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * kernels::sigmoid(x))
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        self.push(Op::Silu(a), value)
    }

    // ── linear algebra ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::Matmul(a, b), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a);
        if sa.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: sa.to_vec(),
                msg: "expected a rank-2 tensor".into(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose(a), value)
    }

    // ── convolution and resampling (rank-3 `(c,h,w)` tensors) ───────────────

    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let si = self.shape_of(input).to_vec();
        let sw = self.shape_of(weight).to_vec();
        if si.len() != 3 {
            return Err(Error::InvalidShape {
                op: "conv3x3",
                shape: si,
                msg: "input must be (c_in, h, w)".into(),
            });
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != si[0] {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                lhs: si,
                rhs: sw,
            });
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let c_out = sw[0];
        if let Some(b) = bias {
            let sb = self.shape_of(b);
            if sb != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv3x3 bias",
                    lhs: vec![c_out],
                    rhs: sb.to_vec(),
                });
            }
        }
        let mut out = vec![0.0; c_out * h * w];
        kernels::conv3x3(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            c_in,
            c_out,
            h,
            w,
            &mut out,
        );
        let value = Tensor::new(vec![c_out, h, w], out)?;
        self.push(
            Op::Conv3x3 {
                input,
                weight,
                bias,
            },
            value,
        )
    }

    pub fn upsample2x(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "upsample2x",
                shape: s,
                msg: "input must be (c, h, w)".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        kernels::upsample2x(self.value(input).data(), c, h, w, &mut out);
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push(Op::Upsample2x(input), value)
    }

    pub fn avgpool2x(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "avgpool2x",
                shape: s,
                msg: "input must be (c, h, w) with even h and w".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * (h / 2) * (w / 2)];
        kernels::avgpool2x(self.value(input).data(), c, h, w, &mut out);
        let value = Tensor::new(vec![c, h / 2, w / 2], out)?;
        self.push(Op::Avgpool2x(input), value)
    }

    // ── shape manipulation ──────────────────────────────────────────────────

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                msg: format!("cannot hold {} elements", self.value(input).numel()),
            });
        }
        let value = Tensor::new(shape, self.value(input).data().to_vec())?;
        self.push(Op::Reshape(input), value)
    }

    /// Concatenation along axis 0. All parts must agree on the remaining axes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat: empty part list"))?;
        let tail_shape = self.shape_of(first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s.is_empty() || s[1..] != tail_shape[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape_of(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * tail_shape.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail_shape);
        let value = Tensor::new(shape, data)?;
        self.push(Op::Concat(parts.to_vec()), value)
    }

    // ── lookup and gather ───────────────────────────────────────────────────

    /// Row lookup into a `(vocab, dim)` table; duplicate ids are allowed
    /// and their gradients accumulate.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape_of(table).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: s,
                msg: "table must be (vocab, dim)".into(),
            });
        }
        let (vocab, dim) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(&self.value(table).data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    /// Index selection: rows (`axis == 0`) or columns (`axis == 1`) of a
    /// rank-2 tensor, or elements of a rank-1 tensor (`axis == 0`).
    pub fn gather(&mut self, input: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        let (value, op_axis) = match (s.len(), axis) {
            (1, 0) => {
                let src = self.value(input).data();
                let mut data = Vec::with_capacity(indices.len());
                for &i in indices {
                    if i >= s[0] {
                        return Err(Error::IndexOutOfRange {
                            op: "gather",
                            index: i,
                            size: s[0],
                        });
                    }
                    data.push(src[i]);
                }
                (Tensor::new(vec![indices.len()], data)?, 0)
            }
            (2, 0) => {
                let (rows, cols) = (s[0], s[1]);
                let src = self.value(input).data();
                let mut data = Vec::with_capacity(indices.len() * cols);
                for &i in indices {
                    if i >= rows {
                        return Err(Error::IndexOutOfRange {
                            op: "gather",
                            index: i,
                            size: rows,
                        });
                    }
                    data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
                }
                (Tensor::new(vec![indices.len(), cols], data)?, 0)
            }
            (2, 1) => {
                let (rows, cols) = (s[0], s[1]);
                let src = self.value(input).data();
                let mut data = Vec::with_capacity(rows * indices.len());
                for r in 0..rows {
                    for &j in indices {
                        if j >= cols {
                            return Err(Error::IndexOutOfRange {
                                op: "gather",
                                index: j,
                                size: cols,
                            });
                        }
                        data.push(src[r * cols + j]);
                    }
                }
                (Tensor::new(vec![rows, indices.len()], data)?, 1)
            }
            _ => {
                return Err(Error::InvalidShape {
                    op: "gather",
                    shape: s,
                    msg: format!("unsupported rank/axis combination (axis {axis})"),
                })
            }
        };
        self.push(
            Op::Gather {
                input,
                axis: op_axis,
                indices: indices.to_vec(),
            },
            value,
        )
    }

    // ── normalization, softmax, reductions ─────────────────────────────────

    pub fn group_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 3 || groups == 0 || s[0] % groups != 0 {
            return Err(Error::InvalidShape {
                op: "group_norm",
                shape: s,
                msg: format!("input must be (c, h, w) with {groups} dividing c"),
            });
        }
        let c = s[0];
        for (name, n) in [("gamma", gamma), ("beta", beta)] {
            if self.shape_of(n) != [c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" {
                        "group_norm gamma"
                    } else {
                        "group_norm beta"
                    },
                    lhs: vec![c],
                    rhs: self.shape_of(n).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; self.value(input).numel()];
        kernels::group_norm(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            s[1],
            s[2],
            groups,
            eps,
            &mut out,
        );
        let value = Tensor::new(s, out)?;
        self.push(
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            },
            value,
        )
    }

    /// Softmax over one axis of a rank-2 tensor. `axis == 1` normalizes each
    /// row; `axis == 0` is recorded as transpose-softmax-transpose.
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: s,
                msg: format!("expected a rank-2 tensor and axis 0 or 1, got axis {axis}"),
            });
        }
        if axis == 0 {
            let t = self.transpose(input)?;
            let sm = self.softmax(t, 1)?;
            return self.transpose(sm);
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; rows * cols];
        kernels::softmax_rows(self.value(input).data(), rows, cols, &mut out);
        let value = Tensor::new(s, out)?;
        self.push(Op::SoftmaxRows(input), value)
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(input).data().iter().sum();
        self.push(Op::SumAll(input), Tensor::scalar(total))
    }

    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId> {
        let n = self.value(input).numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean_all",
                shape: self.shape_of(input).to_vec(),
                msg: "mean of an empty tensor".into(),
            });
        }
        let total: f64 = self.value(input).data().iter().sum();
        self.push(Op::MeanAll(input), Tensor::scalar(total / n as f64))
    }

    /// Sum of a rank-2 tensor over `axis`, producing a rank-1 tensor
    /// (`axis == 0` sums each column, `axis == 1` each row).
    pub fn sum_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                shape: s,
                msg: format!("expected a rank-2 tensor and axis 0 or 1, got axis {axis}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(input).data();
        let value = if axis == 0 {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, &v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            Tensor::new(vec![cols], out)?
        } else {
            let mut out = vec![0.0; rows];
            for (r, o) in out.iter_mut().enumerate() {
                *o = src[r * cols..(r + 1) * cols].iter().sum();
            }
            Tensor::new(vec![rows], out)?
        };
        self.push(Op::SumAxis { input, axis }, value)
    }

    // ── composite helpers (recorded as primitive chains) ────────────────────

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    pub fn mean_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "mean_axis",
                shape: s,
                msg: "expected a rank-2 tensor".into(),
            });
        }
        let n = s[axis.min(1)];
        let summed = self.sum_axis(input, axis)?;
        self.scale(summed, 1.0 / n as f64)
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` matrix via
    /// the ones-matmul composition `ones(m,1) @ bias(1,n)`, keeping the
    /// primitive set free of implicit broadcasting.
    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape_of(x).to_vec();
        let sb = self.shape_of(bias).to_vec();
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_rows",
                lhs: sx,
                rhs: sb,
            });
        }
        let ones = self.leaf(Tensor::ones(vec![sx[0], 1]));
        let row = self.reshape(bias, vec![1, sx[1]])?;
        let tiled = self.matmul(ones, row)?;
        self.add(x, tiled)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean_all(sq)
    }

    // ── backward pass ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// `requires_grad` node; `requires_grad` leaves not reachable from the
    /// root get explicit zero gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward called on a no-grad tape"));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.shape_of(root).to_vec(),
                msg: "root must be a scalar".into(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::invalid(
                "backward: root does not depend on any requires_grad input",
            ));
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::new(
            self.shape_of(root).to_vec(),
            vec![1.0],
        )?);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Children have larger ids and were already processed, so this
            // node's gradient is final; take it, push contributions to the
            // parents, then put it back for the caller.
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        // Unreached requires_grad leaves report zero gradients so parameter
        // sweeps need no reachability special-casing.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    let _ = id;
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds `delta` into the gradient slot of `target`, if it tracks grads.
    fn accumulate(&self, target: NodeId, grads: &mut [Option<Tensor>], delta: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(slot) => {
                for (s, &d) in slot.data_mut().iter_mut().zip(delta) {
                    *s += d;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.shape_of(target).to_vec(), delta.to_vec())
                        .expect("delta matches target shape"),
                );
            }
        }
    }

    /// As [`Tape::accumulate`] but takes ownership, avoiding a copy when the
    /// slot is empty — the common case, since most nodes have one consumer.
    fn accumulate_owned(&self, target: NodeId, grads: &mut [Option<Tensor>], delta: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(slot) => {
                for (s, d) in slot.data_mut().iter_mut().zip(delta) {
                    *s += d;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.shape_of(target).to_vec(), delta)
                        .expect("delta matches target shape"),
                );
            }
        }
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, grads, gd);
                self.accumulate(*b, grads, gd);
            }
            Op::Mul(a, b) => {
                if self.wants_grad(*a) {
                    let vb = self.value(*b).data();
                    let delta: Vec<f64> = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accumulate_owned(*a, grads, delta);
                }
                if self.wants_grad(*b) {
                    let va = self.value(*a).data();
                    let delta: Vec<f64> = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate_owned(*b, grads, delta);
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                if self.wants_grad(*a) {
                    let delta: Vec<f64> = gd.iter().zip(vb).map(|(g, y)| g / y).collect();
                    self.accumulate_owned(*a, grads, delta);
                }
                if self.wants_grad(*b) {
                    let va = self.value(*a).data();
                    let delta: Vec<f64> = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate_owned(*b, grads, delta);
                }
            }
            Op::Scale(a, c) => {
                let delta: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.accumulate_owned(*a, grads, delta);
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, grads, gd);
            }
            Op::Matmul(a, b) => {
                let sa = self.shape_of(*a);
                let sb = self.shape_of(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants_grad(*a) {
                    let mut delta = vec![0.0; m * k];
                    kernels::matmul_abt_acc(gd, self.value(*b).data(), m, n, k, &mut delta);
                    self.accumulate_owned(*a, grads, delta);
                }
                if self.wants_grad(*b) {
                    let mut delta = vec![0.0; k * n];
                    kernels::matmul_atb_acc(self.value(*a).data(), gd, m, k, n, &mut delta);
                    self.accumulate_owned(*b, grads, delta);
                }
            }
            Op::Conv3x3 {
                input,
                weight,
                bias,
            } => {
                let si = self.shape_of(*input);
                let sw = self.shape_of(*weight);
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let c_out = sw[0];
                let mut gi = self
                    .wants_grad(*input)
                    .then(|| vec![0.0; c_in * h * w]);
                let mut gw = self
                    .wants_grad(*weight)
                    .then(|| vec![0.0; c_out * c_in * 9]);
                let mut gb = bias
                    .filter(|b| self.wants_grad(*b))
                    .map(|_| vec![0.0; c_out]);
                kernels::conv3x3_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    c_in,
                    c_out,
                    h,
                    w,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    self.accumulate_owned(*input, grads, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate_owned(*weight, grads, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate_owned(*b, grads, gb);
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape_of(*a);
                let mut delta = vec![0.0; s.iter().product()];
                kernels::upsample2x_backward(gd, s[0], s[1], s[2], &mut delta);
                self.accumulate_owned(*a, grads, delta);
            }
            Op::Avgpool2x(a) => {
                let s = self.shape_of(*a);
                let mut delta = vec![0.0; s.iter().product()];
                kernels::avgpool2x_backward(gd, s[0], s[1], s[2], &mut delta);
                self.accumulate_owned(*a, grads, delta);
            }
            Op::Reshape(a) => {
                // Same flat layout, only the shape differs.
                self.accumulate(*a, grads, gd);
            }
            Op::Transpose(a) => {
                let s = self.shape_of(*a);
                let (r, c) = (s[0], s[1]);
                let mut delta = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        delta[j * c + i] = gd[i * r + j];
                    }
                }
                self.accumulate_owned(*a, grads, delta);
            }
            Op::Concat(parts) => {
                let row_stride: usize = self.shape_of(parts[0])[1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape_of(p)[0] * row_stride.max(1);
                    self.accumulate(p, grads, &gd[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants_grad(*table) {
                    let dim = self.shape_of(*table)[1];
                    let mut delta = vec![0.0; self.value(*table).numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for (d, &g) in delta[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&gd[row * dim..(row + 1) * dim])
                        {
                            *d += g;
                        }
                    }
                    self.accumulate_owned(*table, grads, delta);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let s = self.shape_of(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gi = vec![0.0; c * h * w];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                kernels::group_norm_backward(
                    self.value(*input).data(),
                    self.value(*gamma).data(),
                    gd,
                    c,
                    h,
                    w,
                    *groups,
                    *eps,
                    &mut gi,
                    &mut gg,
                    &mut gb,
                );
                self.accumulate_owned(*input, grads, gi);
                self.accumulate_owned(*gamma, grads, gg);
                self.accumulate_owned(*beta, grads, gb);
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                let delta: Vec<f64> = gd
                    .iter()
                    .zip(va)
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate_owned(*a, grads, delta);
            }
            Op::SoftmaxRows(a) => {
                let s = self.shape_of(*a);
                let (rows, cols) = (s[0], s[1]);
                let y = self.nodes[id].value.data();
                let mut delta = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, &yv), &gv) in delta[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate_owned(*a, grads, delta);
            }
            Op::SumAll(a) => {
                let delta = vec![gd[0]; self.value(*a).numel()];
                self.accumulate_owned(*a, grads, delta);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let delta = vec![gd[0] / n as f64; n];
                self.accumulate_owned(*a, grads, delta);
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape_of(*input);
                let (rows, cols) = (s[0], s[1]);
                let mut delta = vec![0.0; rows * cols];
                if *axis == 0 {
                    for r in 0..rows {
                        delta[r * cols..(r + 1) * cols].copy_from_slice(gd);
                    }
                } else {
                    for r in 0..rows {
                        delta[r * cols..(r + 1) * cols].fill(gd[r]);
                    }
                }
                self.accumulate_owned(*input, grads, delta);
            }
            Op::Gather {
                input,
                axis,
                indices,
            } => {
                if self.wants_grad(*input) {
                    let s = self.shape_of(*input);
                    let mut delta = vec![0.0; self.value(*input).numel()];
                    match (s.len(), axis) {
                        (1, _) => {
                            for (k, &i) in indices.iter().enumerate() {
                                delta[i] += gd[k];
                            }
                        }
                        (2, 0) => {
                            let cols = s[1];
                            for (k, &i) in indices.iter().enumerate() {
                                for (d, &g) in delta[i * cols..(i + 1) * cols]
                                    .iter_mut()
                                    .zip(&gd[k * cols..(k + 1) * cols])
                                {
                                    *d += g;
                                }
                            }
                        }
                        (2, 1) => {
                            let cols = s[1];
                            let k = indices.len();
                            for r in 0..s[0] {
                                for (kk, &j) in indices.iter().enumerate() {
                                    delta[r * cols + j] += gd[r * k + kk];
                                }
                            }
                        }
                        _ => unreachable!("gather forward validated rank/axis"),
                    }
                    self.accumulate_owned(*input, grads, delta);
                }
            }
        }
        Ok(())
    }
}
