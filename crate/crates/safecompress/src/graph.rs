//! Reverse-mode automatic differentiation over a static compute graph.
//!
//! Nodes are appended in construction order, so every parent index is
//! smaller than its child and the graph is acyclic by construction.
//! `forward` evaluates the ancestors of a root in index order and caches
//! values; `backward` seeds the scalar root with 1 and walks the same
//! ancestors once, in reverse, accumulating gradients into parents.
//!
//! Inputs are named placeholders bound at `forward` time. Parameters are
//! named, persistent leaves; after `backward` each parameter tensor holds
//! its accumulated gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Const,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    CrossEntropyMean { logits: NodeId, labels: NodeId },
    BceWithLogitsMean { logits: NodeId, targets: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::CrossEntropyMean { .. } => "cross_entropy",
            Op::BceWithLogitsMean { .. } => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::CrossEntropyMean {
                logits: a,
                labels: b,
            }
            | Op::BceWithLogitsMean {
                logits: a,
                targets: b,
            } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    forward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise stable softmax of a flat row-major matrix.
fn softmax_rows(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - m).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Named placeholder bound at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), None)
    }

    /// Named persistent leaf that receives gradients.
    pub fn param(&mut self, name: &str, init: Tensor) -> NodeId {
        self.push(Op::Param(name.to_string()), Some(init))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), None)
    }

    /// Adds a bias row vector to every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor), None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a), None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a), None)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SoftmaxRows(a), None)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), None)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a), None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()), None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(parts.to_vec()), None)
    }

    /// Mean negative log softmax probability of the labelled class.
    /// `labels` is a length-batch vector of integral class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::CrossEntropyMean { logits, labels }, None)
    }

    /// Mean binary cross-entropy on raw logits, stable for large |z|.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::BceWithLogitsMean { logits, targets }, None)
    }

    /// x @ w + b, the affine layer.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let prod = self.matmul(x, w);
        self.add_bias(prod, b)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn node_grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn param_id(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| match &n.op {
                Op::Param(p) => p == name,
                _ => false,
            })
            .map(NodeId)
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        let id = self.param_id(name)?;
        self.nodes[id.0].value.as_ref()
    }

    pub fn param_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.param_id(name)?;
        self.forward_done = false;
        self.nodes[id.0].value.as_mut()
    }

    /// Replace a parameter's values. Invalidates cached activations.
    pub fn set_param(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let t = self
            .param_tensor_mut(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        t.set_values(values)
    }

    /// Parameters in creation order, for optimizer traversal.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.forward_done = false;
        self.nodes
            .iter_mut()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some((name.clone(), n.value.as_mut().expect("param value"))),
                _ => None,
            })
            .collect()
    }

    /// Ancestor set of `root`, as a boolean membership vector.
    fn reachable(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            for p in self.nodes[i].op.parents() {
                stack.push(p.0);
            }
        }
        seen
    }

    /// Evaluate the ancestors of `root` with the given input bindings and
    /// return the root value. Intermediates stay cached for `backward`.
    pub fn forward(&mut self, root: NodeId, inputs: &BTreeMap<String, Tensor>) -> Result<Tensor> {
        let seen = self.reachable(root);
        for i in 0..self.nodes.len() {
            if !seen[i] {
                continue;
            }
            let value = match &self.nodes[i].op {
                Op::Input(name) => inputs
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Op::Param(_) | Op::Const => {
                    let t = self.nodes[i].value.as_ref().expect("leaf value").clone();
                    if !t.is_finite() {
                        return Err(Error::NonFinite {
                            op: self.nodes[i].op.name(),
                        });
                    }
                    t
                }
                op => self.eval(op)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        self.forward_done = true;
        Ok(self.nodes[root.0].value.clone().expect("root evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("parent evaluated")
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        match op {
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, k) = (a.rows(), a.cols());
                let (k2, n) = (b.rows(), b.cols());
                if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        detail: format!("{:?} x {:?}", a.shape(), b.shape()),
                    });
                }
                let mut out = vec![0.0; m * n];
                let (av, bv) = (a.values(), b.values());
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &bv[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aip * brow[j];
                        }
                    }
                }
                Tensor::new(vec![m, n], out)
            }
            Op::AddBias(x, b) => {
                let (x, b) = (self.val(*x), self.val(*b));
                let (m, n) = (x.rows(), x.cols());
                if b.numel() != n {
                    return Err(Error::ShapeMismatch {
                        op: "add_bias",
                        detail: format!("matrix {:?} bias {:?}", x.shape(), b.shape()),
                    });
                }
                let mut out = x.values().to_vec();
                for r in 0..m {
                    for j in 0..n {
                        out[r * n + j] += b.values()[j];
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_add = matches!(op, Op::Add(..));
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        op: if is_add { "add" } else { "mul" },
                        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                    });
                }
                let out = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(x, y)| if is_add { x + y } else { x * y })
                    .collect();
                Tensor::new(a.shape().to_vec(), out)
            }
            Op::Scale(a, c) => {
                let a = self.val(*a);
                Tensor::new(
                    a.shape().to_vec(),
                    a.values().iter().map(|v| v * c).collect(),
                )
            }
            Op::Relu(a) => {
                let a = self.val(*a);
                Tensor::new(
                    a.shape().to_vec(),
                    a.values().iter().map(|&v| v.max(0.0)).collect(),
                )
            }
            Op::Sigmoid(a) => {
                let a = self.val(*a);
                Tensor::new(
                    a.shape().to_vec(),
                    a.values().iter().map(|&v| sigmoid(v)).collect(),
                )
            }
            Op::SoftmaxRows(a) => {
                let a = self.val(*a);
                let (m, n) = (a.rows(), a.cols());
                Tensor::new(a.shape().to_vec(), softmax_rows(a.values(), m, n))
            }
            Op::SumAll(a) => Ok(Tensor::scalar(self.val(*a).values().iter().sum())),
            Op::MeanAll(a) => {
                let a = self.val(*a);
                Ok(Tensor::scalar(
                    a.values().iter().sum::<f64>() / a.numel() as f64,
                ))
            }
            Op::ConcatCols(parts) => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let m = tensors[0].rows();
                if tensors.iter().any(|t| t.rows() != m) {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        detail: "row counts differ".to_string(),
                    });
                }
                let total: usize = tensors.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(m * total);
                for r in 0..m {
                    for t in &tensors {
                        out.extend_from_slice(t.row(r));
                    }
                }
                Tensor::new(vec![m, total], out)
            }
            Op::ConcatRows(parts) => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                let n = tensors[0].cols();
                if tensors.iter().any(|t| t.cols() != n) {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        detail: "column counts differ".to_string(),
                    });
                }
                let rows: usize = tensors.iter().map(|t| t.rows()).sum();
                let mut out = Vec::with_capacity(rows * n);
                for t in &tensors {
                    out.extend_from_slice(t.values());
                }
                Tensor::new(vec![rows, n], out)
            }
            Op::CrossEntropyMean { logits, labels } => {
                let (z, y) = (self.val(*logits), self.val(*labels));
                let (m, n) = (z.rows(), z.cols());
                if y.numel() != m {
                    return Err(Error::ShapeMismatch {
                        op: "cross_entropy",
                        detail: format!("{} logit rows, {} labels", m, y.numel()),
                    });
                }
                let mut total = 0.0;
                for r in 0..m {
                    let label = class_index(y.values()[r], n)?;
                    let row = z.row(r);
                    total += log_sum_exp(row) - row[label];
                }
                Ok(Tensor::scalar(total / m as f64))
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let (z, t) = (self.val(*logits), self.val(*targets));
                if z.numel() != t.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "bce_with_logits",
                        detail: format!("{} logits, {} targets", z.numel(), t.numel()),
                    });
                }
                let mut total = 0.0;
                for (&zi, &ti) in z.values().iter().zip(t.values()) {
                    total += zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p();
                }
                Ok(Tensor::scalar(total / z.numel() as f64))
            }
            Op::Input(_) | Op::Param(_) | Op::Const => unreachable!("leaves handled in forward"),
        }
    }

    /// Backpropagate from a scalar root. Every reachable parameter tensor
    /// receives its accumulated gradient; the same gradients are returned
    /// keyed by parameter name.
    pub fn backward(&mut self, root: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if !self.forward_done || self.nodes[root.0].value.is_none() {
            return Err(Error::BackwardBeforeForward);
        }
        if self.nodes[root.0].value.as_ref().unwrap().numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: "root must be scalar".to_string(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        let seen = self.reachable(root);
        // Parents precede children, so descending index order is a
        // reverse topological order; each node is visited exactly once.
        for i in (0..self.nodes.len()).rev() {
            if !seen[i] || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(&op, &grad)?;
        }

        let mut out = BTreeMap::new();
        for node in &mut self.nodes {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &node.grad {
                    let tensor = node.value.as_mut().expect("param value");
                    tensor.set_grad(g.clone());
                    let mut gt = Tensor::new(tensor.shape().to_vec(), g.clone())?;
                    gt.set_grad(g.clone());
                    out.insert(name.clone(), gt);
                }
            }
        }
        Ok(out)
    }

    fn add_grad(&mut self, id: NodeId, delta: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn propagate(&mut self, op: &Op, grad: &[f64]) -> Result<()> {
        match op {
            Op::Input(_) | Op::Param(_) | Op::Const => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                let (av, bv) = (at.values().to_vec(), bt.values().to_vec());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let g = grad[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += g * bv[p * n + j];
                            db[p * n + j] += g * av[i * k + p];
                        }
                    }
                }
                self.add_grad(*a, da);
                self.add_grad(*b, db);
            }
            Op::AddBias(x, b) => {
                let (m, n) = {
                    let xt = self.val(*x);
                    (xt.rows(), xt.cols())
                };
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for j in 0..n {
                        db[j] += grad[r * n + j];
                    }
                }
                self.add_grad(*x, grad.to_vec());
                self.add_grad(*b, db);
            }
            Op::Add(a, b) => {
                self.add_grad(*a, grad.to_vec());
                self.add_grad(*b, grad.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.val(*a).values().to_vec();
                let bv = self.val(*b).values().to_vec();
                self.add_grad(*a, grad.iter().zip(&bv).map(|(g, v)| g * v).collect());
                self.add_grad(*b, grad.iter().zip(&av).map(|(g, v)| g * v).collect());
            }
            Op::Scale(a, c) => {
                self.add_grad(*a, grad.iter().map(|g| g * c).collect());
            }
            Op::Relu(a) => {
                let xv = self.val(*a).values().to_vec();
                self.add_grad(
                    *a,
                    grad.iter()
                        .zip(&xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let yv: Vec<f64> = self.val(*a).values().iter().map(|&v| sigmoid(v)).collect();
                self.add_grad(
                    *a,
                    grad.iter()
                        .zip(&yv)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect(),
                );
            }
            Op::SoftmaxRows(a) => {
                let at = self.val(*a);
                let (m, n) = (at.rows(), at.cols());
                let y = softmax_rows(at.values(), m, n);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let dot: f64 = (0..n).map(|j| grad[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        da[r * n + j] = y[r * n + j] * (grad[r * n + j] - dot);
                    }
                }
                self.add_grad(*a, da);
            }
            Op::SumAll(a) => {
                let numel = self.val(*a).numel();
                self.add_grad(*a, vec![grad[0]; numel]);
            }
            Op::MeanAll(a) => {
                let numel = self.val(*a).numel();
                self.add_grad(*a, vec![grad[0] / numel as f64; numel]);
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.val(*p).cols()).collect();
                let rows = self.val(parts[0]).rows();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (part, &w) in parts.iter().zip(&widths) {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    self.add_grad(*part, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for part in parts {
                    let numel = self.val(*part).numel();
                    self.add_grad(*part, grad[offset..offset + numel].to_vec());
                    offset += numel;
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                let (z, y) = (self.val(*logits), self.val(*labels));
                let (m, n) = (z.rows(), z.cols());
                let probs = softmax_rows(z.values(), m, n);
                let labels: Vec<usize> = y
                    .values()
                    .iter()
                    .map(|&v| class_index(v, n))
                    .collect::<Result<_>>()?;
                let mut dz = probs;
                for (r, &label) in labels.iter().enumerate() {
                    dz[r * n + label] -= 1.0;
                }
                let scale = grad[0] / m as f64;
                for v in &mut dz {
                    *v *= scale;
                }
                self.add_grad(*logits, dz);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let (z, t) = (self.val(*logits), self.val(*targets));
                let n = z.numel() as f64;
                let dz: Vec<f64> = z
                    .values()
                    .iter()
                    .zip(t.values())
                    .map(|(&zi, &ti)| grad[0] * (sigmoid(zi) - ti) / n)
                    .collect();
                self.add_grad(*logits, dz);
            }
        }
        Ok(())
    }
}

fn class_index(value: f64, classes: usize) -> Result<usize> {
    let idx = value as usize;
    if value.fract() != 0.0 || value < 0.0 || idx >= classes {
        return Err(Error::LabelOutOfRange {
            label: if value < 0.0 { usize::MAX } else { idx },
            classes,
        });
    }
    Ok(idx)
}

/// Encode integer class labels as a tensor usable by `cross_entropy`.
pub fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::vector(labels.iter().map(|&l| l as f64).collect())
}

/// One-hot encode a label.
pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn identity_linear_layer() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.param("b", Tensor::vector(vec![0.0, 0.0]));
        let y = g.affine(x, w, b);
        let out = g
            .forward(
                y,
                &bind(&[("x", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap())]),
            )
            .unwrap();
        assert_eq!(out.values(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        let out = g
            .forward(
                s,
                &bind(&[("x", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap())]),
            )
            .unwrap();
        assert_eq!(out.values(), &[0.5, 0.5]);
    }

    // Oracle: straight-line arithmetic transcription of the same fixed
    // weights, written without any engine calls.
    #[test]
    fn two_layer_net_matches_straight_line_oracle() {
        let w1 = [[0.2, -0.4, 0.1], [0.7, 0.3, -0.5]];
        let b1 = [0.1, -0.2, 0.05];
        let w2 = [[0.6, -0.1], [-0.3, 0.8], [0.2, 0.4]];
        let b2 = [-0.05, 0.15];
        let x = [0.9, -1.3];

        // hand evaluation
        let mut h = [0.0f64; 3];
        for j in 0..3 {
            let pre: f64 = x[0] * w1[0][j] + x[1] * w1[1][j] + b1[j];
            h[j] = pre.max(0.0);
        }
        let mut expect = [0.0f64; 2];
        for j in 0..2 {
            expect[j] = h[0] * w2[0][j] + h[1] * w2[1][j] + h[2] * w2[2][j] + b2[j];
        }

        let mut g = Graph::new();
        let xin = g.input("x");
        let w1n = g.param("w1", Tensor::matrix(2, 3, w1.concat()).unwrap());
        let b1n = g.param("b1", Tensor::vector(b1.to_vec()));
        let w2n = g.param("w2", Tensor::matrix(3, 2, w2.concat()).unwrap());
        let b2n = g.param("b2", Tensor::vector(b2.to_vec()));
        let a1 = g.affine(xin, w1n, b1n);
        let h1 = g.relu(a1);
        let out = g.affine(h1, w2n, b2n);
        let got = g
            .forward(
                out,
                &bind(&[("x", Tensor::matrix(1, 2, x.to_vec()).unwrap())]),
            )
            .unwrap();
        for (a, e) in got.values().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn product_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w", Tensor::scalar(3.0));
        let l = g.mul(w, x);
        g.forward(l, &bind(&[("x", Tensor::scalar(2.0))])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].values(), &[2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![1.0, -1.0]));
        let sq = g.mul(w, w);
        let l = g.sum_all(sq);
        g.forward(l, &BTreeMap::new()).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].values(), &[2.0, -2.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.input("y");
        let l = g.cross_entropy(z, y);
        let loss = g
            .forward(
                l,
                &bind(&[
                    ("z", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
                    ("y", label_tensor(&[0])),
                ]),
            )
            .unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logits_stay_finite() {
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.input("y");
        let l = g.cross_entropy(z, y);
        let loss = g
            .forward(
                l,
                &bind(&[
                    ("z", Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap()),
                    ("y", label_tensor(&[0])),
                ]),
            )
            .unwrap();
        assert!(loss.item().abs() < 1e-9);
    }

    // Oracle: per-row loss computed by direct transcription, then averaged.
    #[test]
    fn cross_entropy_batch_is_mean_of_rows() {
        let rows = [
            (vec![0.3, -0.7, 1.1], 2usize),
            (vec![-0.2, 0.9, 0.4], 0usize),
            (vec![2.0, 2.0, -1.0], 1usize),
        ];
        let mut expect = 0.0;
        for (z, label) in &rows {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - z[*label];
        }
        expect /= rows.len() as f64;

        let flat: Vec<f64> = rows.iter().flat_map(|(z, _)| z.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.input("y");
        let l = g.cross_entropy(z, y);
        let loss = g
            .forward(
                l,
                &bind(&[
                    ("z", Tensor::matrix(3, 3, flat).unwrap()),
                    ("y", label_tensor(&labels)),
                ]),
            )
            .unwrap();
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_softmax_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = 3usize;

        let mut g = Graph::new();
        let z = g.param("z", Tensor::matrix(1, 5, logits.clone()).unwrap());
        let y = g.input("y");
        let l = g.cross_entropy(z, y);
        let inputs = bind(&[("y", label_tensor(&[label]))]);
        g.forward(l, &inputs).unwrap();
        let analytic = g.backward(l).unwrap()["z"].values().to_vec();

        let h = 1e-6;
        for i in 0..5 {
            let mut plus = logits.clone();
            plus[i] += h;
            g.set_param("z", plus).unwrap();
            let fp = g.forward(l, &inputs).unwrap().item();
            let mut minus = logits.clone();
            minus[i] -= h;
            g.set_param("z", minus).unwrap();
            let fm = g.forward(l, &inputs).unwrap().item();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(
                rel < 1e-5,
                "component {i}: analytic {} fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-30.0..30.0)).collect();
            let sm = softmax_rows(&vals, 3, 4);
            for r in 0..3 {
                let s: f64 = sm[r * 4..(r + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        let err = g.forward(s, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnboundInput(name) if name == "x"));
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(1.0));
        let l = g.sum_all(w);
        assert!(matches!(g.backward(l), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.input("y");
        let l = g.cross_entropy(z, y);
        let err = g
            .forward(
                l,
                &bind(&[
                    ("z", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
                    ("y", label_tensor(&[2])),
                ]),
            )
            .unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 2,
                classes: 2
            }
        ));
    }

    #[test]
    fn shape_mismatch_names_the_offending_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let m = g.matmul(a, b);
        let err = g
            .forward(
                m,
                &bind(&[
                    ("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()),
                    ("b", Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap()),
                ]),
            )
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.relu(x);
        let err = g
            .forward(s, &bind(&[("x", Tensor::vector(vec![f64::INFINITY]))]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn gradients_accumulate_across_shared_parents() {
        // w used twice: L = w*w + w  =>  dL/dw = 2w + 1
        let mut g = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0));
        let sq = g.mul(w, w);
        let s = g.add(sq, w);
        let l = g.sum_all(s);
        g.forward(l, &BTreeMap::new()).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["w"].values(), &[7.0]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_always_normalize(
                logits in proptest::collection::vec(-50.0f64..50.0, 8),
            ) {
                let sm = softmax_rows(&logits, 2, 4);
                for r in 0..2 {
                    let sum: f64 = sm[r * 4..(r + 1) * 4].iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                    prop_assert!(sm[r * 4..(r + 1) * 4].iter().all(|p| *p >= 0.0));
                }
            }

            #[test]
            fn cross_entropy_is_non_negative(
                logits in proptest::collection::vec(-30.0f64..30.0, 6),
                label in 0usize..3,
            ) {
                let mut g = Graph::new();
                let z = g.input("z");
                let y = g.input("y");
                let l = g.cross_entropy(z, y);
                let mut inputs = BTreeMap::new();
                inputs.insert("z".to_string(), Tensor::matrix(2, 3, logits).unwrap());
                inputs.insert("y".to_string(), label_tensor(&[label, (label + 1) % 3]));
                let loss = g.forward(l, &inputs).unwrap().item();
                prop_assert!(loss >= 0.0);
            }
        }
    }
}
