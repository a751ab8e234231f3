//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! The models here are small MLPs with embeddings, elementwise modulation
//! and mean pooling, so the op set is deliberately minimal. A [`Graph`] is
//! rebuilt per forward pass; tensors are immutable once recorded, and
//! gradients live in per-node buffers filled by a single reverse sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Divisors with magnitude below this are rejected by [`Graph::binary`]
/// with [`BinaryOpKind::Div`]. Non-negativity of multiplicative slots is
/// guaranteed upstream, but not strict positivity.
pub const DIV_EPSILON: f64 = 1e-8;

/// The six dimension-preserving binary operations of the modulation
/// operation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOpKind {
    Max,
    Min,
    Mul,
    Div,
    Add,
    Sub,
}

impl BinaryOpKind {
    pub const ALL: [BinaryOpKind; 6] = [
        BinaryOpKind::Max,
        BinaryOpKind::Min,
        BinaryOpKind::Mul,
        BinaryOpKind::Div,
        BinaryOpKind::Add,
        BinaryOpKind::Sub,
    ];

    /// Symbol used when printing expressions.
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOpKind::Max => "max",
            BinaryOpKind::Min => "min",
            BinaryOpKind::Mul => "*",
            BinaryOpKind::Div => "/",
            BinaryOpKind::Add => "+",
            BinaryOpKind::Sub => "-",
        }
    }

    /// Whether the right-hand operand must be elementwise non-negative.
    pub fn needs_nonneg_rhs(self) -> bool {
        matches!(self, BinaryOpKind::Mul | BinaryOpKind::Div)
    }
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Precondition(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::Precondition(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a node on a [`Graph`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Rule {
    Leaf,
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Binary(BinaryOpKind, NodeId, NodeId),
    MeanRows(Vec<NodeId>),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, start: usize },
    Row { src: NodeId, index: usize },
    ScaleBroadcast { vec: NodeId, scalar: NodeId },
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    rule: Rule,
    requires_grad: bool,
}

/// A recorded forward computation: ordered primitive ops with enough
/// structure to run one reverse sweep. Inputs of every op are recorded
/// earlier, so reverse node order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    /// Multiply-accumulate count of all matmuls recorded so far.
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, rule: Rule, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            rule,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a constant leaf (no gradient tracked).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Rule::Leaf, false)
    }

    /// Insert a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Rule::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Matrix product. `a` must be 2-D; `b` may be 2-D (standard product)
    /// or 1-D (matrix-vector, result 1-D).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n, vec_rhs) = match sb.len() {
            1 => (sb[0], 1, true),
            2 => (sb[0], sb[1], false),
            _ => return Err(mismatch()),
        };
        if k != kb {
            return Err(mismatch());
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        self.macs += (m * k * n) as u64;
        let value = if vec_rhs {
            Tensor::vector(out)
        } else {
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Rule::Matmul(a, b), rg))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.needs_grad(x);
        self.push(value, Rule::Relu(x), rg)
    }

    /// Elementwise binary op over identically shaped tensors.
    pub fn binary(&mut self, op: BinaryOpKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        if op == BinaryOpKind::Div {
            if let Some((i, v)) = self
                .value(b)
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| v.abs() < DIV_EPSILON)
            {
                return Err(Error::DivNearZero { index: i, value: *v });
            }
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = da
            .iter()
            .zip(db)
            .map(|(&x, &y)| match op {
                BinaryOpKind::Max => x.max(y),
                BinaryOpKind::Min => x.min(y),
                BinaryOpKind::Mul => x * y,
                BinaryOpKind::Div => x / y,
                BinaryOpKind::Add => x + y,
                BinaryOpKind::Sub => x - y,
            })
            .collect();
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Rule::Binary(op, a, b), rg))
    }

    /// Arithmetic mean of equally shaped 1-D rows.
    pub fn mean_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = rows.first() else {
            return Err(Error::Precondition("mean_pool over empty sequence".into()));
        };
        let shape = self.value(first).shape.clone();
        for &r in rows {
            if self.value(r).shape != shape {
                return Err(Error::ShapeMismatch {
                    op: "mean_pool",
                    left: shape,
                    right: self.value(r).shape.clone(),
                });
            }
        }
        let n = rows.len() as f64;
        let mut data = vec![0.0; self.value(first).len()];
        for &r in rows {
            for (acc, v) in data.iter_mut().zip(self.value(r).data()) {
                *acc += v;
            }
        }
        for v in data.iter_mut() {
            *v /= n;
        }
        let rg = rows.iter().any(|&r| self.needs_grad(r));
        Ok(self.push(Tensor { shape, data }, Rule::MeanRows(rows.to_vec()), rg))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Precondition("concat of no tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape.len() != 1 {
                return Err(Error::Precondition("concat expects 1-D tensors".into()));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(Tensor::vector(data), Rule::Concat(parts.to_vec()), rg))
    }

    /// Contiguous 1-D slice `[start, start+len)`.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(src);
        if v.shape.len() != 1 || start + len > v.len() {
            return Err(Error::Precondition(format!(
                "slice [{start}, {}) out of range for shape {:?}",
                start + len,
                v.shape
            )));
        }
        let data = v.data[start..start + len].to_vec();
        let rg = self.needs_grad(src);
        Ok(self.push(Tensor::vector(data), Rule::Slice { src, start }, rg))
    }

    /// Row lookup from a 2-D tensor (embedding fetch).
    pub fn row(&mut self, src: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(src);
        if v.shape.len() != 2 {
            return Err(Error::Precondition("row lookup needs a 2-D tensor".into()));
        }
        let (rows, cols) = (v.shape[0], v.shape[1]);
        if index >= rows {
            return Err(Error::IndexOutOfBounds {
                index,
                bound: rows,
            });
        }
        let data = v.data[index * cols..(index + 1) * cols].to_vec();
        let rg = self.needs_grad(src);
        Ok(self.push(Tensor::vector(data), Rule::Row { src, index }, rg))
    }

    /// `vec * s` with `s` a single-element tensor.
    pub fn scale(&mut self, vec: NodeId, scalar: NodeId) -> Result<NodeId> {
        if self.value(scalar).len() != 1 {
            return Err(Error::Precondition("scale expects a scalar tensor".into()));
        }
        let s = self.value(scalar).item();
        let value = Tensor {
            shape: self.value(vec).shape.clone(),
            data: self.value(vec).data.iter().map(|v| v * s).collect(),
        };
        let rg = self.needs_grad(vec) || self.needs_grad(scalar);
        Ok(self.push(value, Rule::ScaleBroadcast { vec, scalar }, rg))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs_grad(x);
        self.push(Tensor::scalar(m), Rule::Mean(x), rg)
    }

    /// Reverse sweep from a scalar loss node. Visits each recorded op
    /// exactly once in reverse topological order; leaf gradients are read
    /// back with [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Precondition(
                "backward requires a scalar loss node".into(),
            ));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_rule(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(t) => {
                for (a, d) in t.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                let shape = self.nodes[id.0].value.shape.clone();
                *slot = Some(Tensor {
                    shape,
                    data: delta.to_vec(),
                });
            }
        }
    }

    fn accumulate_at(&mut self, id: NodeId, offset: usize, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        if self.grads[id.0].is_none() {
            let shape = self.nodes[id.0].value.shape.clone();
            self.grads[id.0] = Some(Tensor::zeros(shape));
        }
        let t = self.grads[id.0].as_mut().unwrap();
        for (a, d) in t.data[offset..offset + delta.len()].iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn apply_rule(&mut self, i: usize, g: &Tensor) -> Result<()> {
        match self.nodes[i].rule.clone() {
            Rule::Leaf => {}
            Rule::Matmul(a, b) => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 1 { 1 } else { sb[1] };
                let da = self.value(a).data().to_vec();
                let db = self.value(b).data().to_vec();
                // dA = g · Bᵀ
                if self.needs_grad(a) {
                    let mut ga = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = g.data[i2 * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i2 * k + p] += gv * db[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                }
                // dB = Aᵀ · g
                if self.needs_grad(b) {
                    let mut gb = vec![0.0; k * n];
                    for i2 in 0..m {
                        for p in 0..k {
                            let av = da[i2 * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g.data[i2 * n + j];
                            }
                        }
                    }
                    self.accumulate(b, &gb);
                }
            }
            Rule::Relu(x) => {
                let gate: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(x, &gate);
            }
            Rule::Binary(op, a, b) => {
                let da = self.value(a).data().to_vec();
                let db = self.value(b).data().to_vec();
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for j in 0..da.len() {
                    let (x, y, gv) = (da[j], db[j], g.data[j]);
                    match op {
                        BinaryOpKind::Add => {
                            ga[j] = gv;
                            gb[j] = gv;
                        }
                        BinaryOpKind::Sub => {
                            ga[j] = gv;
                            gb[j] = -gv;
                        }
                        BinaryOpKind::Mul => {
                            ga[j] = gv * y;
                            gb[j] = gv * x;
                        }
                        BinaryOpKind::Div => {
                            ga[j] = gv / y;
                            gb[j] = -gv * x / (y * y);
                        }
                        // Subgradient at ties goes to the first argument.
                        BinaryOpKind::Max => {
                            if x >= y {
                                ga[j] = gv;
                            } else {
                                gb[j] = gv;
                            }
                        }
                        BinaryOpKind::Min => {
                            if x <= y {
                                ga[j] = gv;
                            } else {
                                gb[j] = gv;
                            }
                        }
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Rule::MeanRows(rows) => {
                let n = rows.len() as f64;
                let share: Vec<f64> = g.data.iter().map(|v| v / n).collect();
                for r in rows {
                    self.accumulate(r, &share);
                }
            }
            Rule::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    let slice = g.data[offset..offset + len].to_vec();
                    self.accumulate(p, &slice);
                    offset += len;
                }
            }
            Rule::Slice { src, start } => {
                self.accumulate_at(src, start, &g.data);
            }
            Rule::Row { src, index } => {
                let cols = self.value(src).shape()[1];
                self.accumulate_at(src, index * cols, &g.data);
            }
            Rule::ScaleBroadcast { vec, scalar } => {
                let s = self.value(scalar).item();
                let dv = self.value(vec).data().to_vec();
                let gvec: Vec<f64> = g.data.iter().map(|v| v * s).collect();
                let gs: f64 = g.data.iter().zip(&dv).map(|(a, b)| a * b).sum();
                self.accumulate(vec, &gvec);
                self.accumulate(scalar, &[gs]);
            }
            Rule::Mean(x) => {
                let n = self.value(x).len() as f64;
                let share = vec![g.data[0] / n; self.value(x).len()];
                self.accumulate(x, &share);
            }
        }
        Ok(())
    }
}

/// Compare analytic gradients of a scalar-valued computation against
/// central finite differences, returning the worst relative error over all
/// input coordinates.
///
/// `build` must construct the same computation for the same inputs; it is
/// called once analytically and `2n+1` times for perturbed inputs.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Precondition("eps must be positive".into()));
    }
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::Precondition("computation must be scalar-valued".into()));
        }
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("objective value".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = build(&mut graph, &ids)?;
    graph.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[ti].data()[j];
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference quotient".into()));
            }
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
