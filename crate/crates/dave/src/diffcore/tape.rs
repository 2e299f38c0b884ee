//! Reverse-mode differentiation over a flat operation tape.
//!
//! Nodes are appended in execution order, so parents always precede their
//! children and a single reverse sweep visits every node exactly once.

use std::collections::HashMap;

use ndarray::ArrayView2;
use thiserror::Error;

use super::array::DenseArray;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("node {node}: shape mismatch for {op}: {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("node {node}: non-finite value produced by {op}")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unbound input {0:?} during forward replay")]
    UnboundInput(String),
    #[error("gather index {index} out of range for {rows} rows")]
    GatherOutOfRange { index: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Row-broadcast bias add: `[r, c] + [c]`.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Fused log(sigmoid(x)) = -softplus(-x).
    LogSigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    GatherRows(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every named input.
pub type GradMap = HashMap<String, DenseArray>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) = -softplus(-x), stable at both tails.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -((-x).exp()).ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> DenseArray {
        let node = &self.nodes[id.0];
        DenseArray::from_vec(node.shape.clone(), node.value.clone())
            .expect("tape node holds a valid array")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn vals(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, name: impl Into<String>, value: DenseArray) -> NodeId {
        self.push_leaf(Op::Input(name.into()), value)
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    fn push_leaf(&mut self, op: Op, value: DenseArray) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape: value.shape().to_vec(), value: value.values().to_vec() });
        id
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId, TapeError> {
        let id = NodeId(self.nodes.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TapeError::NonFinite { node: id.0, op: op_name(&op) });
        }
        self.nodes.push(Node { op, shape, value });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let value = matmul_values(self.vals(a), sa[0], sa[1], self.vals(b), sb[1]);
        self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                op: "add",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let value = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), sa, value)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                op: "add_bias",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let cols = sa[1];
        let bias_vals = self.vals(bias).to_vec();
        let value = self
            .vals(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias_vals[i % cols])
            .collect();
        self.push(Op::AddBias(a, bias), sa, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                op: "mul",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let value = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), sa, value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Scale(a, factor), |x| factor * x)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        self.unary(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TapeError> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn unary(
        &mut self,
        a: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, TapeError> {
        let shape = self.shape(a).to_vec();
        let value = self.vals(a).iter().map(|&x| f(x)).collect();
        self.push(op, shape, value)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let value = vec![self.vals(a).iter().sum()];
        self.push(Op::Sum(a), vec![1], value)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let n = self.vals(a).len().max(1) as f64;
        let value = vec![self.vals(a).iter().sum::<f64>() / n];
        self.push(Op::Mean(a), vec![1], value)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId, TapeError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                op: "gather_rows",
                detail: format!("{sa:?} is not a matrix"),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let src = self.vals(a).to_vec();
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            if i >= rows {
                return Err(TapeError::GatherOutOfRange { index: i, rows });
            }
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out_rows = indices.len();
        self.push(Op::GatherRows(a, indices), vec![out_rows, cols], value)
    }

    /// Convenience: `a - b` as `a + (-b)`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// Rebind a named input; the next `forward` replay picks the value up.
    pub fn bind(&mut self, name: &str, value: DenseArray) -> Result<(), TapeError> {
        for node in &mut self.nodes {
            if let Op::Input(n) = &node.op {
                if n == name {
                    if node.shape != value.shape() {
                        return Err(TapeError::ShapeMismatch {
                            node: 0,
                            op: "bind",
                            detail: format!("{:?} vs {:?}", node.shape, value.shape()),
                        });
                    }
                    node.value = value.values().to_vec();
                    return Ok(());
                }
            }
        }
        Err(TapeError::UnboundInput(name.to_string()))
    }

    /// Recompute every node value in order from the current leaf values.
    pub fn forward(&mut self) -> Result<(), TapeError> {
        for idx in 0..self.nodes.len() {
            let value = match self.nodes[idx].op.clone() {
                Op::Input(_) | Op::Constant => continue,
                Op::MatMul(a, b) => {
                    let (ra, ca) = (self.shape(a)[0], self.shape(a)[1]);
                    let cb = self.shape(b)[1];
                    matmul_values(self.vals(a), ra, ca, self.vals(b), cb)
                }
                Op::Add(a, b) => {
                    self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect()
                }
                Op::AddBias(a, b) => {
                    let cols = self.shape(a)[1];
                    let bias = self.vals(b).to_vec();
                    self.vals(a).iter().enumerate().map(|(i, x)| x + bias[i % cols]).collect()
                }
                Op::Mul(a, b) => {
                    self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect()
                }
                Op::Relu(a) => self.vals(a).iter().map(|&x| x.max(0.0)).collect(),
                Op::Sigmoid(a) => self.vals(a).iter().map(|&x| sigmoid(x)).collect(),
                Op::LogSigmoid(a) => self.vals(a).iter().map(|&x| log_sigmoid(x)).collect(),
                Op::Log(a) => self.vals(a).iter().map(|&x| x.ln()).collect(),
                Op::Exp(a) => self.vals(a).iter().map(|&x| x.exp()).collect(),
                Op::Neg(a) => self.vals(a).iter().map(|&x| -x).collect(),
                Op::Scale(a, c) => self.vals(a).iter().map(|&x| c * x).collect(),
                Op::AddScalar(a, c) => self.vals(a).iter().map(|&x| x + c).collect(),
                Op::Clamp(a, lo, hi) => self.vals(a).iter().map(|&x| x.clamp(lo, hi)).collect(),
                Op::Sum(a) => vec![self.vals(a).iter().sum()],
                Op::Mean(a) => {
                    let n = self.vals(a).len().max(1) as f64;
                    vec![self.vals(a).iter().sum::<f64>() / n]
                }
                Op::GatherRows(a, ref idxs) => {
                    let cols = self.shape(a)[1];
                    let src = self.vals(a);
                    let mut out = Vec::with_capacity(idxs.len() * cols);
                    for &i in idxs {
                        out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
                    }
                    out
                }
            };
            if value.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFinite { node: idx, op: op_name(&self.nodes[idx].op) });
            }
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss node; returns gradients per input name.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, TapeError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input(_) | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ra, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let cb = self.shape(*b)[1];
                    // dA = g . B^T ; dB = A^T . g
                    let bt = transpose(self.vals(*b), ca, cb);
                    let da = matmul_values(&g, ra, cb, &bt, ca);
                    let at = transpose(self.vals(*a), ra, ca);
                    let db = matmul_values(&at, ca, ra, &g, cb);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::AddBias(a, b) => {
                    let cols = self.shape(*a)[1];
                    let mut gb = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.vals(*b)).map(|(gi, y)| gi * y).collect();
                    let gb = g.iter().zip(self.vals(*a)).map(|(gi, x)| gi * x).collect();
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Relu(a) => {
                    // subgradient at 0 is 0
                    let ga = g
                        .iter()
                        .zip(self.vals(*a))
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(self.vals(*a))
                        .map(|(gi, &x)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 - s)
                        })
                        .collect();
                    accumulate(&mut grads, a.0, ga);
                }
                Op::LogSigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(self.vals(*a))
                        .map(|(gi, &x)| gi * sigmoid(-x))
                        .collect();
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Log(a) => {
                    let ga = g.iter().zip(self.vals(*a)).map(|(gi, &x)| gi / x).collect();
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(self.vals(idx_id(idx))).map(|(gi, &y)| gi * y).collect();
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Neg(a) => {
                    accumulate(&mut grads, a.0, g.iter().map(|x| -x).collect());
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, a.0, g.iter().map(|x| c * x).collect());
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut grads, a.0, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g
                        .iter()
                        .zip(self.vals(*a))
                        .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Sum(a) => {
                    let n = self.vals(*a).len();
                    accumulate(&mut grads, a.0, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.vals(*a).len();
                    accumulate(&mut grads, a.0, vec![g[0] / n as f64; n]);
                }
                Op::GatherRows(a, idxs) => {
                    let cols = self.shape(*a)[1];
                    let rows = self.shape(*a)[0];
                    let mut ga = vec![0.0; rows * cols];
                    for (out_row, &src_row) in idxs.iter().enumerate() {
                        for c in 0..cols {
                            ga[src_row * cols + c] += g[out_row * cols + c];
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
            }
        }

        // The same input name may back several nodes (e.g. one network applied
        // to two batches); their gradients sum.
        let mut map = GradMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input(name) = &node.op {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                match map.get_mut(name) {
                    Some(existing) => {
                        let values = existing.values_mut();
                        for (v, gi) in values.iter_mut().zip(&g) {
                            *v += gi;
                        }
                        if values.iter().any(|v| !v.is_finite()) {
                            return Err(TapeError::NonFinite { node: idx, op: "backward" });
                        }
                    }
                    None => {
                        map.insert(
                            name.clone(),
                            DenseArray::from_vec(node.shape.clone(), g)
                                .map_err(|_| TapeError::NonFinite { node: idx, op: "backward" })?,
                        );
                    }
                }
            }
        }
        Ok(map)
    }

    /// Compare backward gradients against central finite differences.
    ///
    /// Returns the worst relative error over all input components, with an
    /// absolute-error fallback for magnitudes below 1e-8.
    pub fn grad_check(&mut self, loss: NodeId, epsilon: f64) -> Result<f64, TapeError> {
        assert!(epsilon > 0.0 && epsilon <= 1e-3);
        self.forward()?;
        let analytic = self.backward(loss)?;
        let input_names: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some(name.clone()),
                _ => None,
            })
            .collect();
        let mut worst: f64 = 0.0;
        for name in input_names {
            let base = self
                .nodes
                .iter()
                .find_map(|n| match &n.op {
                    Op::Input(nm) if nm == &name => Some(n.value.clone()),
                    _ => None,
                })
                .unwrap();
            let shape = analytic[&name].shape().to_vec();
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += epsilon;
                self.bind(&name, DenseArray::from_vec(shape.clone(), plus).unwrap())?;
                self.forward()?;
                let f_plus = self.scalar_value(loss);

                let mut minus = base.clone();
                minus[i] -= epsilon;
                self.bind(&name, DenseArray::from_vec(shape.clone(), minus).unwrap())?;
                self.forward()?;
                let f_minus = self.scalar_value(loss);

                self.bind(&name, DenseArray::from_vec(shape.clone(), base.clone()).unwrap())?;

                let numeric = (f_plus - f_minus) / (2.0 * epsilon);
                let exact = analytic[&name].values()[i];
                let denom = exact.abs().max(numeric.abs());
                let err = if denom < 1e-8 {
                    (exact - numeric).abs()
                } else {
                    (exact - numeric).abs() / denom
                };
                worst = worst.max(err);
            }
        }
        self.forward()?;
        Ok(worst)
    }
}

// Exp's backward reads its own output value; helper keeps borrow checker happy.
fn idx_id(idx: usize) -> NodeId {
    NodeId(idx)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input(_) => "input",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::LogSigmoid(_) => "log_sigmoid",
        Op::Log(_) => "log",
        Op::Exp(_) => "exp",
        Op::Neg(_) => "neg",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Clamp(..) => "clamp",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::GatherRows(..) => "gather_rows",
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn matmul_values(a: &[f64], ra: usize, ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let av = ArrayView2::from_shape((ra, ca), a).expect("valid lhs shape");
    let bv = ArrayView2::from_shape((ca, cb), b).expect("valid rhs shape");
    av.dot(&bv).into_raw_vec_and_offset().0
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
