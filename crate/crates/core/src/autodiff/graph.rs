use std::collections::HashMap;

use super::array::{gemm, Array};
use super::GraphError;

/// Index of a node in a [`Graph`]. Parents always have smaller ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// Rebindable input (parameter or data).
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Recip(NodeId),
    /// 1 where x > 0; not differentiable.
    Step(NodeId),
    /// 1 where a <= b; not differentiable.
    LessEq(NodeId, NodeId),
    /// 1 where lo < x < hi; not differentiable.
    InRange {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    SumTo {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Broadcast {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: Axis,
    },
    Slice {
        x: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    },
    Pad {
        x: NodeId,
        axis: Axis,
        start: usize,
        total: usize,
    },
    GaussianLogDensity {
        x: NodeId,
        mean: NodeId,
        log_std: NodeId,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Minimum(..) => "minimum",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Recip(_) => "recip",
            Op::Step(_) => "step",
            Op::LessEq(..) => "less_eq",
            Op::InRange { .. } => "in_range",
            Op::Clamp { .. } => "clamp",
            Op::SumTo { .. } => "sum_to",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
        }
    }

    pub(crate) fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Minimum(a, b)
            | Op::AddRow(a, b)
            | Op::LessEq(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::InRange { x, .. }
            | Op::Clamp { x, .. }
            | Op::SumTo { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. } => vec![*x],
            Op::Tanh(x)
            | Op::Relu(x)
            | Op::Softplus(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Recip(x)
            | Op::Step(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::GaussianLogDensity { x, mean, log_std } => vec![*x, *mean, *log_std],
        }
    }

    /// Ops whose output is piecewise constant in every input.
    pub(crate) fn is_indicator(&self) -> bool {
        matches!(self, Op::Step(_) | Op::LessEq(..) | Op::InRange { .. })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
}

/// Recorded computation over rank-2 arrays.
///
/// Nodes are evaluated eagerly as they are added, so every node has a cached
/// value. [`Graph::forward`] replays the recorded ops with new leaf values and
/// returns a fresh cache without touching the graph. Gradients are built as
/// ordinary nodes (see [`Graph::grad`]), which is what makes gradients of
/// gradients work.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) values: Vec<Array>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached value from construction time.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Adds a rebindable input (parameters and data alike).
    pub fn leaf(&mut self, value: Array) -> Result<NodeId, GraphError> {
        self.push_value(Op::Leaf, value)
    }

    /// Adds a fixed value that [`Graph::forward`] never rebinds.
    pub fn constant(&mut self, value: Array) -> Result<NodeId, GraphError> {
        self.push_value(Op::Constant, value)
    }

    fn push_value(&mut self, op: Op, value: Array) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        if !value.is_matrix() {
            return Err(GraphError::NotMatrix {
                node: id.0,
                shape: value.shape().to_vec(),
            });
        }
        if !value.is_finite() {
            return Err(GraphError::NonFinite {
                node: id.0,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            rows: value.rows(),
            cols: value.cols(),
        });
        self.values.push(value);
        Ok(id)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        let (rows, cols) = self.infer_shape(id, &op)?;
        let value = compute(id, &op, &self.values)?;
        debug_assert_eq!((value.rows(), value.cols()), (rows, cols));
        self.nodes.push(Node { op, rows, cols });
        self.values.push(value);
        Ok(id)
    }

    fn mismatch(&self, id: NodeId, op: &Op, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: id.0,
            op: op.name(),
            detail,
        }
    }

    fn infer_shape(&self, id: NodeId, op: &Op) -> Result<(usize, usize), GraphError> {
        for p in op.parents() {
            if p.0 >= id.0 {
                return Err(GraphError::UnknownNode { node: p.0 });
            }
        }
        let s = |n: NodeId| self.shape(n);
        let same = |a: NodeId, b: NodeId| -> Result<(usize, usize), GraphError> {
            if s(a) == s(b) {
                Ok(s(a))
            } else {
                Err(self.mismatch(id, op, format!("{:?} vs {:?}", s(a), s(b))))
            }
        };
        match op {
            Op::Leaf | Op::Constant => unreachable!("leaves are pushed with values"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) | Op::LessEq(a, b) => {
                same(*a, *b)
            }
            Op::AddRow(x, b) => {
                let ((_, xc), (br, bc)) = (s(*x), s(*b));
                if br != 1 || bc != xc {
                    return Err(self.mismatch(
                        id,
                        op,
                        format!("bias {:?} for input {:?}", s(*b), s(*x)),
                    ));
                }
                Ok(s(*x))
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = s(*a);
                let (br, bc) = s(*b);
                let (m, k1) = if *ta { (ac, ar) } else { (ar, ac) };
                let (k2, n) = if *tb { (bc, br) } else { (br, bc) };
                if k1 != k2 {
                    return Err(self.mismatch(
                        id,
                        op,
                        format!("inner dims {k1} vs {k2} ({:?}, {:?})", s(*a), s(*b)),
                    ));
                }
                Ok((m, n))
            }
            Op::Affine { x, .. }
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Softplus(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Recip(x)
            | Op::Step(x)
            | Op::InRange { x, .. }
            | Op::Clamp { x, .. } => Ok(s(*x)),
            Op::SumTo { x, rows, cols } => {
                let (xr, xc) = s(*x);
                let ok = (*rows == xr || *rows == 1) && (*cols == xc || *cols == 1);
                if !ok {
                    return Err(self.mismatch(id, op, format!("cannot reduce {:?} to ({rows}, {cols})", s(*x))));
                }
                Ok((*rows, *cols))
            }
            Op::Broadcast { x, rows, cols } => {
                let (xr, xc) = s(*x);
                let ok = (xr == *rows || xr == 1) && (xc == *cols || xc == 1);
                if !ok {
                    return Err(self.mismatch(id, op, format!("cannot broadcast {:?} to ({rows}, {cols})", s(*x))));
                }
                Ok((*rows, *cols))
            }
            Op::Concat { parts, axis } => {
                let first = parts
                    .first()
                    .ok_or_else(|| self.mismatch(id, op, "no parts".into()))?;
                let (mut r, mut c) = s(*first);
                for p in &parts[1..] {
                    let (pr, pc) = s(*p);
                    match axis {
                        Axis::Rows if pc == c => r += pr,
                        Axis::Cols if pr == r => c += pc,
                        _ => {
                            return Err(self.mismatch(id, op, format!("part {:?} does not align", s(*p))))
                        }
                    }
                }
                Ok((r, c))
            }
            Op::Slice { x, axis, start, len } => {
                let (xr, xc) = s(*x);
                let extent = if *axis == Axis::Rows { xr } else { xc };
                if start + len > extent {
                    return Err(self.mismatch(id, op, format!("slice {start}+{len} exceeds {extent}")));
                }
                Ok(if *axis == Axis::Rows { (*len, xc) } else { (xr, *len) })
            }
            Op::Pad { x, axis, start, total } => {
                let (xr, xc) = s(*x);
                let extent = if *axis == Axis::Rows { xr } else { xc };
                if start + extent > *total {
                    return Err(self.mismatch(id, op, format!("pad {start}+{extent} exceeds {total}")));
                }
                Ok(if *axis == Axis::Rows { (*total, xc) } else { (xr, *total) })
            }
            Op::GaussianLogDensity { x, mean, log_std } => {
                let (xr, xc) = s(*x);
                if s(*mean) != (xr, xc) {
                    return Err(self.mismatch(id, op, format!("mean {:?} vs sample {:?}", s(*mean), s(*x))));
                }
                let (lr, lc) = s(*log_std);
                if lc != xc || !(lr == 1 || lr == xr) {
                    return Err(self.mismatch(id, op, format!("log_std {:?} vs sample {:?}", s(*log_std), s(*x))));
                }
                Ok((xr, 1))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Minimum(a, b))
    }

    /// `x + b` with `b` a `[1, cols]` row repeated over rows of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::AddRow(x, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)`, transposing each side when its flag is set.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId, GraphError> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId, GraphError> {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu(x))
    }

    /// Overflow-safe `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Square(x))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Recip(x))
    }

    pub fn step(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Step(x))
    }

    pub fn less_eq(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::LessEq(a, b))
    }

    pub fn in_range(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        self.push(Op::InRange { x, lo, hi })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Clamp { x, lo, hi })
    }

    /// Sums down to `[1, cols]`, `[rows, 1]` or `[1, 1]`.
    pub fn sum_to(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        self.push(Op::SumTo { x, rows, cols })
    }

    pub fn broadcast(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Broadcast { x, rows, cols })
    }

    /// Sum of all entries as a `[1, 1]` node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.sum_to(x, 1, 1)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (r, c) = self.shape(x);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / (r * c).max(1) as f64)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, GraphError> {
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, x: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn pad(&mut self, x: NodeId, axis: Axis, start: usize, total: usize) -> Result<NodeId, GraphError> {
        self.push(Op::Pad { x, axis, start, total })
    }

    /// Per-row diagonal-Gaussian log density of `x` under `mean` and
    /// `log_std` (`[1, d]` shared or `[n, d]` per row). Output is `[n, 1]`.
    pub fn gaussian_log_density(&mut self, x: NodeId, mean: NodeId, log_std: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::GaussianLogDensity { x, mean, log_std })
    }

    /// Re-evaluates every node, substituting `bindings` for leaf values.
    /// Unbound leaves keep their construction-time values.
    pub fn forward(&self, bindings: &HashMap<NodeId, Array>) -> Result<Vec<Array>, GraphError> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let value = match &node.op {
                Op::Leaf => match bindings.get(&id) {
                    Some(v) => {
                        if (v.rows(), v.cols()) != (node.rows, node.cols) || !v.is_matrix() {
                            return Err(GraphError::ShapeMismatch {
                                node: i,
                                op: "leaf",
                                detail: format!("bound {:?}, expected ({}, {})", v.shape(), node.rows, node.cols),
                            });
                        }
                        if !v.is_finite() {
                            return Err(GraphError::NonFinite { node: i, op: "leaf" });
                        }
                        v.clone()
                    }
                    None => self.values[i].clone(),
                },
                Op::Constant => self.values[i].clone(),
                op => compute(id, op, &values)?,
            };
            values.push(value);
        }
        Ok(values)
    }
}

fn unary(x: &Array, f: impl Fn(f64) -> f64) -> Array {
    x.map(f)
}

fn compute(id: NodeId, op: &Op, vals: &[Array]) -> Result<Array, GraphError> {
    let v = |n: &NodeId| &vals[n.0];
    let out = match op {
        Op::Leaf | Op::Constant => unreachable!("leaf values are stored, not computed"),
        Op::Add(a, b) => v(a).zip_map(v(b), |p, q| p + q),
        Op::Sub(a, b) => v(a).zip_map(v(b), |p, q| p - q),
        Op::Mul(a, b) => v(a).zip_map(v(b), |p, q| p * q),
        Op::Minimum(a, b) => v(a).zip_map(v(b), f64::min),
        Op::LessEq(a, b) => v(a).zip_map(v(b), |p, q| if p <= q { 1.0 } else { 0.0 }),
        Op::AddRow(x, b) => {
            let (x, b) = (v(x), v(b));
            let c = x.cols();
            let bias = b.data();
            let mut out = x.clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += bias[i % c];
            }
            out
        }
        Op::MatMul { a, b, ta, tb } => gemm(v(a), *ta, v(b), *tb),
        Op::Affine { x, scale, shift } => unary(v(x), |p| scale * p + shift),
        Op::Tanh(x) => unary(v(x), f64::tanh),
        Op::Relu(x) => unary(v(x), |p| p.max(0.0)),
        Op::Softplus(x) => unary(v(x), softplus),
        Op::Sigmoid(x) => unary(v(x), sigmoid),
        Op::Exp(x) => unary(v(x), f64::exp),
        Op::Log(x) => unary(v(x), f64::ln),
        Op::Square(x) => unary(v(x), |p| p * p),
        Op::Recip(x) => unary(v(x), |p| 1.0 / p),
        Op::Step(x) => unary(v(x), |p| if p > 0.0 { 1.0 } else { 0.0 }),
        Op::InRange { x, lo, hi } => unary(v(x), |p| if p > *lo && p < *hi { 1.0 } else { 0.0 }),
        Op::Clamp { x, lo, hi } => unary(v(x), |p| p.clamp(*lo, *hi)),
        Op::SumTo { x, rows, cols } => {
            let x = v(x);
            let (xr, xc) = (x.rows(), x.cols());
            let mut out = Array::zeros(*rows, *cols);
            for r in 0..xr {
                for c in 0..xc {
                    let (tr, tc) = (if *rows == 1 { 0 } else { r }, if *cols == 1 { 0 } else { c });
                    let cur = out.get(tr, tc);
                    out.set(tr, tc, cur + x.get(r, c));
                }
            }
            out
        }
        Op::Broadcast { x, rows, cols } => {
            let x = v(x);
            let (xr, xc) = (x.rows(), x.cols());
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..*rows {
                for c in 0..*cols {
                    data.push(x.get(if xr == 1 { 0 } else { r }, if xc == 1 { 0 } else { c }));
                }
            }
            Array::matrix(*rows, *cols, data)
        }
        Op::Concat { parts, axis } => match axis {
            Axis::Rows => {
                let cols = v(&parts[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    data.extend_from_slice(v(p).data());
                    rows += v(p).rows();
                }
                Array::matrix(rows, cols, data)
            }
            Axis::Cols => {
                let rows = v(&parts[0]).rows();
                let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row_slice(r));
                    }
                }
                Array::matrix(rows, cols, data)
            }
        },
        Op::Slice { x, axis, start, len } => {
            let x = v(x);
            match axis {
                Axis::Rows => {
                    let c = x.cols();
                    Array::matrix(*len, c, x.data()[start * c..(start + len) * c].to_vec())
                }
                Axis::Cols => {
                    let mut data = Vec::with_capacity(x.rows() * len);
                    for r in 0..x.rows() {
                        data.extend_from_slice(&x.row_slice(r)[*start..start + len]);
                    }
                    Array::matrix(x.rows(), *len, data)
                }
            }
        }
        Op::Pad { x, axis, start, total } => {
            let x = v(x);
            match axis {
                Axis::Rows => {
                    let c = x.cols();
                    let mut data = vec![0.0; total * c];
                    data[start * c..(start + x.rows()) * c].copy_from_slice(x.data());
                    Array::matrix(*total, c, data)
                }
                Axis::Cols => {
                    let mut out = Array::zeros(x.rows(), *total);
                    for r in 0..x.rows() {
                        for (c, val) in x.row_slice(r).iter().enumerate() {
                            out.set(r, start + c, *val);
                        }
                    }
                    out
                }
            }
        }
        Op::GaussianLogDensity { x, mean, log_std } => {
            let (x, m, ls) = (v(x), v(mean), v(log_std));
            let (n, d) = (x.rows(), x.cols());
            let shared = ls.rows() == 1;
            let mut data = Vec::with_capacity(n);
            for r in 0..n {
                let mut acc = 0.0;
                for c in 0..d {
                    let l = ls.get(if shared { 0 } else { r }, c);
                    let z = (x.get(r, c) - m.get(r, c)) * (-l).exp();
                    acc += -0.5 * z * z - l - 0.5 * LN_2PI;
                }
                data.push(acc);
            }
            Array::matrix(n, 1, data)
        }
    };
    if !out.is_finite() {
        return Err(GraphError::NonFinite {
            node: id.0,
            op: op.name(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_three() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(0.0)).unwrap();
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let v = g.leaf(Array::column(&[1.0, 2.0])).unwrap();
        let y = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.leaf(Array::zeros(2, 3)).unwrap();
        let b = g.leaf(Array::zeros(2, 2)).unwrap();
        match g.matmul(a, b) {
            Err(GraphError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        assert!(matches!(g.add(a, b), Err(GraphError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(-1.0)).unwrap();
        assert!(matches!(g.log(x), Err(GraphError::NonFinite { op: "log", .. })));
        let big = g.leaf(Array::scalar(1e3)).unwrap();
        assert!(matches!(g.exp(big), Err(GraphError::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn forward_replays_with_new_bindings() {
        let mut g = Graph::new();
        let x = g.leaf(Array::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let z = g.affine(y, 2.0, 1.0).unwrap();
        let vals = g.forward(&HashMap::from([(x, Array::scalar(-2.0))])).unwrap();
        assert_eq!(vals[z.0].item(), 9.0);
        // graph cache untouched
        assert_eq!(g.value(z).item(), 19.0);
        let bad = g.forward(&HashMap::from([(x, Array::zeros(2, 1))]));
        assert!(matches!(bad, Err(GraphError::ShapeMismatch { node: 0, .. })));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut g = Graph::new();
        let a = g.leaf(Array::matrix(3, 4, (0..12).map(|v| (v as f64).sin()).collect())).unwrap();
        let b = g.leaf(Array::matrix(4, 2, (0..8).map(|v| (v as f64).cos()).collect())).unwrap();
        let m = g.matmul(a, b).unwrap();
        let t = g.tanh(m).unwrap();
        let s = g.sum(t).unwrap();
        let first = g.forward(&HashMap::new()).unwrap();
        let second = g.forward(&HashMap::new()).unwrap();
        assert_eq!(first[s.0].item().to_bits(), second[s.0].item().to_bits());
        assert_eq!(first[s.0].item().to_bits(), g.value(s).item().to_bits());
    }

    #[test]
    fn gaussian_log_density_standard_normal_mode() {
        let mut g = Graph::new();
        let x = g.leaf(Array::zeros(1, 3)).unwrap();
        let m = g.leaf(Array::zeros(1, 3)).unwrap();
        let ls = g.leaf(Array::zeros(1, 3)).unwrap();
        let lp = g.gaussian_log_density(x, m, ls).unwrap();
        assert!((g.value(lp).item() + 1.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_pad_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.leaf(Array::matrix(2, 1, vec![5.0, 6.0])).unwrap();
        let c = g.concat(&[a, b], Axis::Cols).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, Axis::Cols, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0]);
        let p = g.pad(s, Axis::Rows, 1, 4).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 5.0, 6.0, 0.0]);
        let r = g.concat(&[a, a], Axis::Rows).unwrap();
        assert_eq!(g.shape(r), (4, 2));
    }
}
