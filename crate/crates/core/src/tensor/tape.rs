use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{finite, kernels, Tensor};
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    NormalizeRows(Var, Vec<f64>),
    RowLogSoftmax(Var, f64),
    PairwiseSqDist(Var),
    PickPerRow(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records tensor operations in creation order so that gradients can be
/// pulled back from a scalar loss.
///
/// Nodes are numbered by creation; since every operation refers only to
/// earlier nodes the numbering is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves without a path to the loss hold zeros;
    /// constants and intermediate nodes return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input treated as fixed; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Var> {
        finite(name, &data)?;
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, _, _)
            | Op::NormalizeRows(a, _)
            | Op::RowLogSoftmax(a, _)
            | Op::PairwiseSqDist(a)
            | Op::PickPerRow(a, _) => self.nodes[a.0].requires_grad,
        };
        let value = Tensor::from_parts_unchecked(shape, data);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = x.shape().to_vec();
        self.push(name, op, shape, data)
    }

    fn map(&mut self, name: &'static str, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let shape = x.shape().to_vec();
        self.push(name, op, shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", Op::Add(a, b), a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", Op::Sub(a, b), a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", Op::Mul(a, b), a, b, |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", Op::Div(a, b), a, b, |p, q| p / q)
    }

    /// Adds the vector `row` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.expect_matrix("add_row")?;
        let r = self.value(row);
        if r.len() != m || r.rank() > 2 || (r.rank() == 2 && r.rows() != 1) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("{n}x{m} plus row of shape {:?}", r.shape()),
            });
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_exact_mut(m) {
            for (o, &rv) in chunk.iter_mut().zip(r.data()) {
                *o += rv;
            }
        }
        self.push("add_row", Op::AddRow(a, row), vec![n, m], data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, k) = x.expect_matrix("matmul")?;
        let (k2, m) = y.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{n}x{k} times {k2}x{m}"),
            });
        }
        let data = kernels::matmul(x.data(), y.data(), n, k, m);
        self.push("matmul", Op::MatMul(a, b), vec![n, m], data)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.expect_matrix("transpose")?;
        let data = kernels::transpose(x.data(), r, c);
        self.push("transpose", Op::Transpose(a), vec![c, r], data)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Vec::new(), vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push("mean", Op::Mean(a), Vec::new(), vec![s])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", Op::Exp(a), a, math::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", Op::Log(a), a, math::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", Op::Tanh(a), a, math::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", Op::Relu(a), a, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map("scale", Op::Scale(a, factor), a, |v| v * factor)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", Op::AddScalar(a), a, |v| v + c)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes only strictly
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidConfig(format!("clamp bounds {lo} > {hi}")));
        }
        self.map("clamp", Op::Clamp(a, lo, hi), a, |v| v.clamp(lo, hi))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.expect_matrix("l2_normalize_rows")?;
        let norms = x.row_norms();
        if let Some((row, &norm)) = norms
            .iter()
            .enumerate()
            .find(|(_, &nv)| nv < 1e-12 || nv.is_nan())
        {
            return Err(Error::DegenerateRow { row, norm });
        }
        let mut data = x.data().to_vec();
        for (chunk, &norm) in data.chunks_exact_mut(m).zip(&norms) {
            for v in chunk {
                *v /= norm;
            }
        }
        self.push(
            "l2_normalize_rows",
            Op::NormalizeRows(a, norms),
            vec![n, m],
            data,
        )
    }

    /// Row-wise `log softmax(s / temperature)` with max subtraction.
    pub fn row_log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidTemperature(temperature));
        }
        let x = self.value(a);
        let (n, m) = x.expect_matrix("row_log_softmax")?;
        let inv_tau = 1.0 / temperature;
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = x.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v)) * inv_tau;
            let lse = math::ln(row.iter().map(|&v| math::exp(v * inv_tau - max)).sum());
            data.extend(row.iter().map(|&v| (v * inv_tau - max) - lse));
        }
        self.push(
            "row_log_softmax",
            Op::RowLogSoftmax(a, inv_tau),
            vec![n, m],
            data,
        )
    }

    /// `out[j][k] = ‖a_j − a_k‖²` over the rows of `a`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, _) = x.expect_matrix("pairwise_sq_dist")?;
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    data[j * n + k] = x
                        .row(j)
                        .iter()
                        .zip(x.row(k))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                }
            }
        }
        self.push("pairwise_sq_dist", Op::PairwiseSqDist(a), vec![n, n], data)
    }

    /// `out[i] = a[i][index[i]]`.
    pub fn pick_per_row(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.expect_matrix("pick_per_row")?;
        if index.len() != n {
            return Err(Error::ShapeMismatch {
                op: "pick_per_row",
                detail: format!("{} indices for {n} rows", index.len()),
            });
        }
        if let Some(&label) = index.iter().find(|&&j| j >= m) {
            return Err(Error::LabelOutOfRange { label, classes: m });
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| x.get(i, j))
            .collect();
        self.push(
            "pick_per_row",
            Op::PickPerRow(a, index.to_vec()),
            vec![n],
            data,
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    ///
    /// Contributions are summed in reverse creation order, so the result is
    /// deterministic and repeated calls give identical output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.pull_back(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf => {
                    if grads[idx].is_none() {
                        grads[idx] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                _ => grads[idx] = None,
            }
        }
        for g in grads.iter().flatten() {
            finite("backward", g.data())?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts_unchecked(shape, contribution));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn pull_back(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.wants(*b) {
                    self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(x).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, y)| g / y).collect());
                }
                if self.wants(*b) {
                    let gb = gd
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.wants(*row) {
                    let m = g.cols();
                    let mut gr = vec![0.0; m];
                    for chunk in gd.chunks_exact(m) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let m = y.shape()[1];
                if self.wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul_bt(gd, y.data(), n, m, k));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul_at(x.data(), gd, n, k, m));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                self.accumulate(grads, *a, kernels::transpose(gd, r, c));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, gd.iter().zip(out).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a, norms) => {
                let m = g.cols();
                let mut ga = vec![0.0; gd.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let (gr, yr) = (&gd[i * m..(i + 1) * m], &out[i * m..(i + 1) * m]);
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..m {
                        ga[i * m + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowLogSoftmax(a, inv_tau) => {
                let m = g.cols();
                let mut ga = vec![0.0; gd.len()];
                for (i, (gr, lr)) in gd.chunks_exact(m).zip(out.chunks_exact(m)).enumerate() {
                    let total: f64 = gr.iter().sum();
                    for j in 0..m {
                        ga[i * m + j] = inv_tau * (gr[j] - math::exp(lr[j]) * total);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PairwiseSqDist(a) => {
                let x = self.value(*a);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let mut ga = vec![0.0; n * d];
                for j in 0..n {
                    for k in 0..n {
                        if j == k {
                            continue;
                        }
                        let w = 2.0 * (gd[j * n + k] + gd[k * n + j]);
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            ga[j * d + c] += w * (x.get(j, c) - x.get(k, c));
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, index) => {
                let m = self.value(*a).cols();
                let mut ga = vec![0.0; self.value(*a).len()];
                for (i, &j) in index.iter().enumerate() {
                    ga[i * m + j] = gd[i];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
