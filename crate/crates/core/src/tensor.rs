//! Dense float64 tensors and a define-by-run reverse-mode autodiff graph.
//!
//! The graph is rebuilt for every minibatch. Nodes are appended in evaluation
//! order, so the node list is already a topological order and `backward`
//! simply walks it in reverse.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: axis {axis} expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },
    #[error("{op}: input {value} outside the supported range (max {limit})")]
    Range {
        op: &'static str,
        value: f64,
        limit: f64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Largest input accepted by [`Graph::positivity_map`]; exp(a/2) overflows
/// float64 a little above 1419.
pub const POSITIVITY_INPUT_LIMIT: f64 = 1400.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} holds {expected} values but {} were supplied",
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(TensorError::Dimension {
                    op: "set_grad",
                    axis: 0,
                    expected: self.data.len(),
                    found: g.len(),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    PositivityMap(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Reduce {
        input: NodeId,
        kind: ReduceKind,
        axis: Option<usize>,
    },
    GroupRows {
        input: NodeId,
        group: usize,
        kind: ReduceKind,
    },
    RepeatRows {
        input: NodeId,
        times: usize,
    },
    ConcatCols(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::PositivityMap(_) => "positivity_map",
            Op::Clamp { .. } => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Recip(_) => "recip",
            Op::Sqrt(_) => "sqrt",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Reduce { .. } => "reduce",
            Op::GroupRows { .. } => "group_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation record of a define-by-run computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// First node holding a NaN or infinite value, if any.
    pub fn first_non_finite(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(NodeId)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn unary(&mut self, op: Op, input: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let src = &self.nodes[input.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        };
        let rg = self.needs(&[input]);
        self.push(op, value, rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = &self.nodes[a.0].value.shape;
        let sb = &self.nodes[b.0].value.shape;
        if sa.len() != sb.len() {
            return Err(TensorError::Contract(format!(
                "{op}: rank {} vs rank {}",
                sa.len(),
                sb.len()
            )));
        }
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(TensorError::Dimension {
                    op,
                    axis,
                    expected: x,
                    found: y,
                });
            }
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        record: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
            grad: None,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(record, value, rg))
    }

    /// `out[b,o] = Σ_i input[b,i]·weight[i,o] + bias[o]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let (rows, in_dim) = x.rows_cols("affine input")?;
        let (w_in, out_dim) = w.rows_cols("affine weight")?;
        if w_in != in_dim {
            return Err(TensorError::Dimension {
                op: "affine",
                axis: 0,
                expected: in_dim,
                found: w_in,
            });
        }
        if b.shape.len() != 1 || b.shape[0] != out_dim {
            return Err(TensorError::Dimension {
                op: "affine bias",
                axis: 0,
                expected: out_dim,
                found: b.shape.first().copied().unwrap_or(0),
            });
        }
        let mut out = Vec::with_capacity(rows * out_dim);
        for r in 0..rows {
            out.extend_from_slice(&b.data);
            let row = &mut out[r * out_dim..(r + 1) * out_dim];
            for (i, &xi) in x.data[r * in_dim..(r + 1) * in_dim].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &w.data[i * out_dim..(i + 1) * out_dim];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += xi * wv;
                }
            }
        }
        let value = Tensor {
            shape: vec![rows, out_dim],
            data: out,
            grad: None,
        };
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            value,
            rg,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.unary(Op::Relu(input), input, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Elementwise `exp(a/2)`.
    pub fn positivity_map(&mut self, input: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.nodes[input.0]
            .value
            .data
            .iter()
            .find(|&&v| v > POSITIVITY_INPUT_LIMIT)
        {
            return Err(TensorError::Range {
                op: "positivity_map",
                value: bad,
                limit: POSITIVITY_INPUT_LIMIT,
            });
        }
        Ok(self.unary(Op::PositivityMap(input), input, |v| (0.5 * v).exp()))
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp { input, lo, hi }, input, |v| v.clamp(lo, hi))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn recip(&mut self, input: NodeId) -> NodeId {
        self.unary(Op::Recip(input), input, |v| 1.0 / v)
    }

    pub fn sqrt(&mut self, input: NodeId) -> NodeId {
        self.unary(Op::Sqrt(input), input, f64::sqrt)
    }

    pub fn ln(&mut self, input: NodeId) -> NodeId {
        self.unary(Op::Ln(input), input, f64::ln)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        self.unary(Op::Square(input), input, |v| v * v)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(input, factor), input, |v| v * factor)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, input: NodeId, shift: f64) -> NodeId {
        self.unary(Op::Offset(input, shift), input, |v| v + shift)
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`.
    pub fn reduce(
        &mut self,
        input: NodeId,
        kind: ReduceKind,
        axis: Option<usize>,
    ) -> Result<NodeId> {
        let src = &self.nodes[input.0].value;
        let value = match axis {
            None => {
                let s: f64 = src.data.iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / src.data.len() as f64,
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                if axis >= src.rank() {
                    return Err(TensorError::Dimension {
                        op: "reduce",
                        axis,
                        expected: src.rank(),
                        found: axis,
                    });
                }
                let (outer, extent, inner) = split_axis(&src.shape, axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src.data[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / extent as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = src.shape.clone();
                shape.remove(axis);
                Tensor {
                    shape,
                    data: out,
                    grad: None,
                }
            }
        };
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Reduce { input, kind, axis }, value, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.reduce(input, ReduceKind::Sum, None)
            .expect("full reduction has no axis to check")
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        self.reduce(input, ReduceKind::Mean, None)
            .expect("full reduction has no axis to check")
    }

    /// Reduces consecutive blocks of `group` rows of a matrix into one row each.
    pub fn group_rows(&mut self, input: NodeId, group: usize, kind: ReduceKind) -> Result<NodeId> {
        let src = &self.nodes[input.0].value;
        let (rows, cols) = src.rows_cols("group_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(TensorError::Dimension {
                op: "group_rows",
                axis: 0,
                expected: group.max(1) * (rows / group.max(1)).max(1),
                found: rows,
            });
        }
        let groups = rows / group;
        let mut out = vec![0.0; groups * cols];
        for r in 0..rows {
            let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(&src.data[r * cols..(r + 1) * cols]) {
                *d += s;
            }
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / group as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor {
            shape: vec![groups, cols],
            data: out,
            grad: None,
        };
        let rg = self.needs(&[input]);
        Ok(self.push(Op::GroupRows { input, group, kind }, value, rg))
    }

    /// Repeats every row of a matrix `times` times in place: `[a; b] -> [a; a; b; b]`.
    pub fn repeat_rows(&mut self, input: NodeId, times: usize) -> Result<NodeId> {
        let src = &self.nodes[input.0].value;
        let (rows, cols) = src.rows_cols("repeat_rows")?;
        if times == 0 {
            return Err(TensorError::Contract("repeat_rows with times = 0".into()));
        }
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&src.data[r * cols..(r + 1) * cols]);
            }
        }
        let value = Tensor {
            shape: vec![rows * times, cols],
            data: out,
            grad: None,
        };
        let rg = self.needs(&[input]);
        Ok(self.push(Op::RepeatRows { input, times }, value, rg))
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (ra, ca) = va.rows_cols("concat_cols")?;
        let (rb, cb) = vb.rows_cols("concat_cols")?;
        if ra != rb {
            return Err(TensorError::Dimension {
                op: "concat_cols",
                axis: 0,
                expected: ra,
                found: rb,
            });
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&va.data[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb.data[r * cb..(r + 1) * cb]);
        }
        let value = Tensor {
            shape: vec![ra, ca + cb],
            data: out,
            grad: None,
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    /// Reverse pass from a scalar root. All accumulators are reset first, so
    /// calling this twice leaves the same gradients. Parameter leaves that the
    /// root does not depend on receive zero gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = match node.op {
                Op::Leaf if node.requires_grad => Some(vec![0.0; node.value.data.len()]),
                _ => None,
            };
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].value.grad = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let contributions = self.local_gradients(idx, &upstream);
            self.nodes[idx].value.grad = Some(upstream);
            for (target, g) in contributions {
                let node = &mut self.nodes[target.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.value.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_gradients(&self, idx: usize, up: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value.data;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let map1 = |id: NodeId, f: &dyn Fn(usize) -> f64| -> Vec<(NodeId, Vec<f64>)> {
            if !self.wants(id) {
                return Vec::new();
            }
            vec![(id, (0..up.len()).map(|i| up[i] * f(i)).collect())]
        };
        match node.op {
            Op::Leaf => Vec::new(),
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = val(input);
                let w = val(weight);
                let rows = x.shape[0];
                let in_dim = x.shape[1];
                let out_dim = w.shape[1];
                let mut res = Vec::new();
                if self.wants(input) {
                    let mut dx = vec![0.0; rows * in_dim];
                    for r in 0..rows {
                        let urow = &up[r * out_dim..(r + 1) * out_dim];
                        for i in 0..in_dim {
                            let wrow = &w.data[i * out_dim..(i + 1) * out_dim];
                            dx[r * in_dim + i] = dot(urow, wrow);
                        }
                    }
                    res.push((input, dx));
                }
                if self.wants(weight) {
                    let mut dw = vec![0.0; in_dim * out_dim];
                    for r in 0..rows {
                        let urow = &up[r * out_dim..(r + 1) * out_dim];
                        for (i, &xi) in x.data[r * in_dim..(r + 1) * in_dim].iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[i * out_dim..(i + 1) * out_dim];
                            for (d, &u) in drow.iter_mut().zip(urow) {
                                *d += xi * u;
                            }
                        }
                    }
                    res.push((weight, dw));
                }
                if self.wants(bias) {
                    let mut db = vec![0.0; out_dim];
                    for r in 0..rows {
                        for (d, &u) in db.iter_mut().zip(&up[r * out_dim..(r + 1) * out_dim]) {
                            *d += u;
                        }
                    }
                    res.push((bias, db));
                }
                res
            }
            Op::Relu(a) => {
                let x = &val(a).data;
                map1(a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::PositivityMap(a) => map1(a, &|i| 0.5 * out[i]),
            Op::Clamp { input, lo, hi } => {
                let x = &val(input).data;
                map1(input, &|i| if x[i] < lo || x[i] > hi { 0.0 } else { 1.0 })
            }
            Op::Add(a, b) => {
                let mut res = map1(a, &|_| 1.0);
                res.extend(map1(b, &|_| 1.0));
                res
            }
            Op::Sub(a, b) => {
                let mut res = map1(a, &|_| 1.0);
                res.extend(map1(b, &|_| -1.0));
                res
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&val(a).data, &val(b).data);
                let mut res = map1(a, &|i| xb[i]);
                res.extend(map1(b, &|i| xa[i]));
                res
            }
            Op::Div(a, b) => {
                let xb = &val(b).data;
                let mut res = map1(a, &|i| 1.0 / xb[i]);
                res.extend(map1(b, &|i| -out[i] / xb[i]));
                res
            }
            Op::Recip(a) => map1(a, &|i| -out[i] * out[i]),
            Op::Sqrt(a) => map1(a, &|i| 0.5 / out[i]),
            Op::Ln(a) => {
                let x = &val(a).data;
                map1(a, &|i| 1.0 / x[i])
            }
            Op::Square(a) => {
                let x = &val(a).data;
                map1(a, &|i| 2.0 * x[i])
            }
            Op::Scale(a, c) => map1(a, &|_| c),
            Op::Offset(a, _) => map1(a, &|_| 1.0),
            Op::Reduce { input, kind, axis } => {
                if !self.wants(input) {
                    return Vec::new();
                }
                let src = val(input);
                let g = match axis {
                    None => {
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / src.data.len() as f64,
                        };
                        vec![up[0] * scale; src.data.len()]
                    }
                    Some(axis) => {
                        let (outer, extent, inner) = split_axis(&src.shape, axis);
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / extent as f64,
                        };
                        let mut g = vec![0.0; src.data.len()];
                        for o in 0..outer {
                            for e in 0..extent {
                                let base = (o * extent + e) * inner;
                                for i in 0..inner {
                                    g[base + i] = up[o * inner + i] * scale;
                                }
                            }
                        }
                        g
                    }
                };
                vec![(input, g)]
            }
            Op::GroupRows { input, group, kind } => {
                if !self.wants(input) {
                    return Vec::new();
                }
                let src = val(input);
                let cols = src.shape[1];
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / group as f64,
                };
                let mut g = Vec::with_capacity(src.data.len());
                for r in 0..src.shape[0] {
                    let urow = &up[(r / group) * cols..(r / group + 1) * cols];
                    g.extend(urow.iter().map(|u| u * scale));
                }
                vec![(input, g)]
            }
            Op::RepeatRows { input, times } => {
                if !self.wants(input) {
                    return Vec::new();
                }
                let src = val(input);
                let cols = src.shape[1];
                let mut g = vec![0.0; src.data.len()];
                for r in 0..src.shape[0] * times {
                    let dst = &mut g[(r / times) * cols..(r / times + 1) * cols];
                    for (d, u) in dst.iter_mut().zip(&up[r * cols..(r + 1) * cols]) {
                        *d += u;
                    }
                }
                vec![(input, g)]
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).shape[1];
                let cb = val(b).shape[1];
                let rows = val(a).shape[0];
                let mut res = Vec::new();
                if self.wants(a) {
                    let mut g = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        g.extend_from_slice(&up[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    res.push((a, g));
                }
                if self.wants(b) {
                    let mut g = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        g.extend_from_slice(&up[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    res.push((b, g));
                }
                res
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `f` at `at`. Test oracle only.
pub fn fd_gradient<F>(mut f: F, at: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = at.clone();
    let mut grad = vec![0.0; at.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = at.data[i];
        probe.data[i] = orig + step;
        let plus = f(&probe);
        probe.data[i] = orig - step;
        let minus = f(&probe);
        probe.data[i] = orig;
        *g = (plus - minus) / (2.0 * step);
    }
    Tensor {
        shape: at.shape.clone(),
        data: grad,
        grad: None,
    }
}
