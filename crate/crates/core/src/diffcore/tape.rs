use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{spec_err, Error, Result};
use crate::tensor::{matmul, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    AddRow(usize, usize),
    ColSum(usize),
    BroadcastRows(usize),
    RowSum(usize),
    BroadcastCols(usize),
    Sum(usize),
    Fill(usize),
    Relu(usize),
    ReluMask { grad: usize, pre: usize },
    Sigmoid(usize),
    BceWithLogits { logits: usize, targets: usize },
    Softmax(usize),
    SoftmaxCrossEntropy { logits: usize, targets: usize },
    Slice { src: usize, offset: usize },
    Embed { src: usize, offset: usize },
    Gather { src: usize, rows: Arc<[usize]> },
    ScatterRows { src: usize, rows: Arc<[usize]> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::ColSum(..) => "col_sum",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::RowSum(..) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Sum(..) => "sum",
            Op::Fill(..) => "fill",
            Op::Relu(..) => "relu",
            Op::ReluMask { .. } => "relu_mask",
            Op::Sigmoid(..) => "sigmoid",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Gather { .. } => "gather",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn inputs(&self) -> ([usize; 2], usize) {
        match *self {
            Op::Leaf | Op::Const => ([0, 0], 0),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => ([a, b], 2),
            Op::MatMul { a, b, .. } => ([a, b], 2),
            Op::BceWithLogits { logits, targets } | Op::SoftmaxCrossEntropy { logits, targets } => {
                ([logits, targets], 2)
            }
            // the mask operand of ReluMask is not differentiated through
            Op::ReluMask { grad, .. } => ([grad, 0], 1),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ColSum(a)
            | Op::BroadcastRows(a)
            | Op::RowSum(a)
            | Op::BroadcastCols(a)
            | Op::Sum(a)
            | Op::Fill(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a) => ([a, 0], 1),
            Op::Slice { src, .. } | Op::Embed { src, .. } => ([src, 0], 1),
            Op::Gather { src, .. } | Op::ScatterRows { src, .. } => ([src, 0], 1),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of tensor operations.
///
/// Every operation is evaluated eagerly and its result stored. [`Tape::grad`]
/// writes the reverse sweep back onto the same tape as ordinary operations, so
/// gradients are themselves differentiable.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`
pub(crate) fn bce_with_logits(z: f64, y: f64) -> f64 {
    let pos = if z > 0.0 { z } else { 0.0 };
    pos - z * y + libm::log1p(libm::exp(-libm::fabs(z)))
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let cols = z.cols();
    let mut out = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        let row = z.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = libm::exp(v - max);
            total += e;
            out.push(e);
        }
        for v in &mut out[start..start + cols] {
            *v /= total;
        }
    }
    Tensor::new(z.rows(), cols, out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Const });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical { op: op.kind() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(spec_err!("{what}: shape {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a.0), v)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(spec_err!("matmul: {:?} x {:?} (ta={ta}, tb={tb})", (ar, ac), (br, bc)));
        }
        let v = matmul(self.value(a), self.value(b), ta, tb);
        self.push(Op::MatMul { a: a.0, b: b.0, ta, tb }, v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds the `1 x k` row `row` to every row of the `n x k` matrix `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (_, k) = self.shape(m);
        if self.shape(row) != (1, k) {
            return Err(spec_err!("add_row: row {:?} for matrix {:?}", self.shape(row), self.shape(m)));
        }
        let mut v = self.value(m).clone();
        let r = self.value(row).data().to_vec();
        for chunk in v.data_mut().chunks_mut(k.max(1)) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(Op::AddRow(m.0, row.0), v)
    }

    /// Adds `affine(x) = x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// `n x k -> 1 x k`
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).col_sums();
        self.push(Op::ColSum(a.0), v)
    }

    /// `1 x k -> n x k`
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != 1 {
            return Err(spec_err!("broadcast_rows: expected a row, got {:?}", src.shape()));
        }
        let mut data = Vec::with_capacity(n * src.cols());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let v = Tensor::new(n, src.cols(), data);
        self.push(Op::BroadcastRows(a.0), v)
    }

    /// `n x k -> n x 1`
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).row_sums();
        self.push(Op::RowSum(a.0), v)
    }

    /// `n x 1 -> n x k`
    pub fn broadcast_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let src = self.value(a);
        if src.cols() != 1 {
            return Err(spec_err!("broadcast_cols: expected a column, got {:?}", src.shape()));
        }
        let data = src.data().iter().flat_map(|&x| core::iter::repeat_n(x, k)).collect();
        let v = Tensor::new(src.rows(), k, data);
        self.push(Op::BroadcastCols(a.0), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a.0), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(spec_err!("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Broadcasts a `1 x 1` value to `rows x cols`.
    pub fn fill(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(spec_err!("fill: expected a scalar, got {:?}", self.shape(s)));
        }
        let v = Tensor::filled(rows, cols, self.value(s).item());
        self.push(Op::Fill(s.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a.0), v)
    }

    /// `grad * 1[pre > 0]`; `pre` only supplies the (frozen) sign pattern.
    fn relu_mask(&mut self, grad: Var, pre: usize) -> Result<Var> {
        let mask = &self.nodes[pre].value;
        let v = self.value(grad).zip_map(mask, |g, z| if z > 0.0 { g } else { 0.0 });
        self.push(Op::ReluMask { grad: grad.0, pre }, v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), v)
    }

    /// Elementwise binary cross entropy on logits, fused and stable.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", logits, targets)?;
        let v = self.value(logits).zip_map(self.value(targets), bce_with_logits);
        self.push(Op::BceWithLogits { logits: logits.0, targets: targets.0 }, v)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a));
        self.push(Op::Softmax(a.0), v)
    }

    /// Per-row `logsumexp(z) - <y, z>`, giving `n x 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.same_shape("softmax_cross_entropy", logits, targets)?;
        let z = self.value(logits);
        let y = self.value(targets);
        let data = (0..z.rows())
            .map(|r| {
                let zr = z.row(r);
                log_sum_exp(zr) - zr.iter().zip(y.row(r)).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let v = Tensor::column(data);
        self.push(Op::SoftmaxCrossEntropy { logits: logits.0, targets: targets.0 }, v)
    }

    /// Reads `rows x cols` consecutive entries of `src` starting at `offset`.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let s = self.value(src);
        if offset + rows * cols > s.len() {
            return Err(spec_err!("slice [{offset}, +{}) out of {} entries", rows * cols, s.len()));
        }
        let v = Tensor::new(rows, cols, s.data()[offset..offset + rows * cols].to_vec());
        self.push(Op::Slice { src: src.0, offset }, v)
    }

    /// Zero tensor of shape `rows x cols` with `src` written at `offset`.
    fn embed(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let mut v = Tensor::zeros(rows, cols);
        let s = self.value(src).data();
        v.data_mut()[offset..offset + s.len()].copy_from_slice(s);
        self.push(Op::Embed { src: src.0, offset }, v)
    }

    /// Rows of `src` picked by `rows` (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(src).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(spec_err!("gather_rows: row {bad} out of {n}"));
        }
        self.gather_rows_shared(src, Arc::from(rows))
    }

    fn gather_rows_shared(&mut self, src: Var, rows: Arc<[usize]>) -> Result<Var> {
        let v = self.value(src).gather_rows(&rows);
        self.push(Op::Gather { src: src.0, rows }, v)
    }

    /// Adjoint of `gather_rows`: row `j` of `src` is added into row `rows[j]`.
    fn scatter_rows(&mut self, src: Var, rows: Arc<[usize]>, n: usize) -> Result<Var> {
        let s = self.value(src);
        let k = s.cols();
        let mut v = Tensor::zeros(n, k);
        for (j, &r) in rows.iter().enumerate() {
            for (o, x) in v.data_mut()[r * k..(r + 1) * k].iter_mut().zip(s.row(j)) {
                *o += x;
            }
        }
        self.push(Op::ScatterRows { src: src.0, rows }, v)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: usize, contrib: Var) -> Result<()> {
        adj[target] = Some(match adj[target] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
    ///
    /// The sweep is recorded on this tape, so the returned variables can be
    /// differentiated again. Inputs with no path to `output` get a zero
    /// constant of their own shape.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.shape(output) != (1, 1) {
            return Err(spec_err!("grad: output must be a scalar, got {:?}", self.shape(output)));
        }
        let end = output.0 + 1;
        let start = wrt.iter().map(|v| v.0).min().unwrap_or(end).min(end);

        // depends[i - start]: node i is a function of some wrt variable
        let mut depends = vec![false; end - start];
        for &w in wrt {
            if w.0 < end {
                depends[w.0 - start] = true;
            }
        }
        for i in start..end {
            if depends[i - start] {
                continue;
            }
            let (ins, n) = self.nodes[i].op.inputs();
            depends[i - start] = ins[..n].iter().any(|&j| j >= start && depends[j - start]);
        }
        let dep = |j: usize| j >= start && j < end && depends[j - start];

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if dep(output.0) {
            adj[output.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (start..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !depends[i - start] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &op, g, &dep, &mut adj)?;
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(w);
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    fn backprop_node(
        &mut self,
        node: usize,
        op: &Op,
        g: Var,
        dep: &dyn Fn(usize) -> bool,
        adj: &mut [Option<Var>],
    ) -> Result<()> {
        match *op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if dep(a) {
                    self.accumulate(adj, a, g)?;
                }
                if dep(b) {
                    self.accumulate(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if dep(a) {
                    self.accumulate(adj, a, g)?;
                }
                if dep(b) {
                    let c = self.neg(g)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Mul(a, b) => {
                if dep(a) {
                    let c = self.mul(g, Var(b))?;
                    self.accumulate(adj, a, c)?;
                }
                if dep(b) {
                    let c = self.mul(g, Var(a))?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Scale(a, k) => {
                let c = self.scale(g, k)?;
                self.accumulate(adj, a, c)?;
            }
            Op::AddScalar(a) => self.accumulate(adj, a, g)?,
            Op::MatMul { a, b, ta, tb } => {
                // C = A' B' with A' = op(A), B' = op(B)
                if dep(a) {
                    let c = if ta {
                        self.matmul_t(Var(b), g, tb, true)?
                    } else {
                        self.matmul_t(g, Var(b), false, !tb)?
                    };
                    self.accumulate(adj, a, c)?;
                }
                if dep(b) {
                    let c = if tb {
                        self.matmul_t(g, Var(a), true, ta)?
                    } else {
                        self.matmul_t(Var(a), g, !ta, false)?
                    };
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::AddRow(m, row) => {
                if dep(m) {
                    self.accumulate(adj, m, g)?;
                }
                if dep(row) {
                    let c = self.col_sum(g)?;
                    self.accumulate(adj, row, c)?;
                }
            }
            Op::ColSum(a) => {
                let n = self.nodes[a].value.rows();
                let c = self.broadcast_rows(g, n)?;
                self.accumulate(adj, a, c)?;
            }
            Op::BroadcastRows(a) => {
                let c = self.col_sum(g)?;
                self.accumulate(adj, a, c)?;
            }
            Op::RowSum(a) => {
                let k = self.nodes[a].value.cols();
                let c = self.broadcast_cols(g, k)?;
                self.accumulate(adj, a, c)?;
            }
            Op::BroadcastCols(a) => {
                let c = self.row_sum(g)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Sum(a) => {
                let (r, k) = self.nodes[a].value.shape();
                let c = self.fill(g, r, k)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Fill(s) => {
                let c = self.sum(g)?;
                self.accumulate(adj, s, c)?;
            }
            Op::Relu(a) => {
                let c = self.relu_mask(g, a)?;
                self.accumulate(adj, a, c)?;
            }
            Op::ReluMask { grad, pre } => {
                let c = self.relu_mask(g, pre)?;
                self.accumulate(adj, grad, c)?;
            }
            Op::Sigmoid(a) => {
                let s = Var(node);
                let ns = self.scale(s, -1.0)?;
                let one_minus = self.add_scalar(ns, 1.0)?;
                let ds = self.mul(s, one_minus)?;
                let c = self.mul(g, ds)?;
                self.accumulate(adj, a, c)?;
            }
            Op::BceWithLogits { logits, targets } => {
                if dep(logits) {
                    let s = self.sigmoid(Var(logits))?;
                    let d = self.sub(s, Var(targets))?;
                    let c = self.mul(g, d)?;
                    self.accumulate(adj, logits, c)?;
                }
                if dep(targets) {
                    let gz = self.mul(g, Var(logits))?;
                    let c = self.neg(gz)?;
                    self.accumulate(adj, targets, c)?;
                }
            }
            Op::Softmax(a) => {
                let s = Var(node);
                let k = self.shape(s).1;
                let sg = self.mul(s, g)?;
                let rs = self.row_sum(sg)?;
                let b = self.broadcast_cols(rs, k)?;
                let centered = self.sub(g, b)?;
                let c = self.mul(s, centered)?;
                self.accumulate(adj, a, c)?;
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let k = self.nodes[logits].value.cols();
                let gb = self.broadcast_cols(g, k)?;
                if dep(logits) {
                    let s = self.softmax(Var(logits))?;
                    let d = self.sub(s, Var(targets))?;
                    let c = self.mul(gb, d)?;
                    self.accumulate(adj, logits, c)?;
                }
                if dep(targets) {
                    let gz = self.mul(gb, Var(logits))?;
                    let c = self.neg(gz)?;
                    self.accumulate(adj, targets, c)?;
                }
            }
            Op::Slice { src, offset } => {
                let (r, k) = self.nodes[src].value.shape();
                let c = self.embed(g, offset, r, k)?;
                self.accumulate(adj, src, c)?;
            }
            Op::Embed { src, offset } => {
                let (r, k) = self.nodes[src].value.shape();
                let c = self.slice(g, offset, r, k)?;
                self.accumulate(adj, src, c)?;
            }
            Op::Gather { src, ref rows } => {
                let n = self.nodes[src].value.rows();
                let c = self.scatter_rows(g, rows.clone(), n)?;
                self.accumulate(adj, src, c)?;
            }
            Op::ScatterRows { src, ref rows } => {
                let c = self.gather_rows_shared(g, rows.clone())?;
                self.accumulate(adj, src, c)?;
            }
        }
        Ok(())
    }
}
