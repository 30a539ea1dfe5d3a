//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Each forward pass builds a fresh [`Tape`] bound to a [`ParamStore`].
//! Operations compute their values eagerly and record how to propagate
//! gradients. [`Tape::backward`] replays the tape in reverse from a scalar
//! loss and returns the gradient of every node that depends on a parameter or
//! a [`Tape::variable`] input.
//!
//! All operations work on rank-2 tensors; scalars are `1 × 1`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_at_kernel, matmul_bt_kernel, matmul_kernel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Softmax(Var),
    /// Saves the per-row reciprocal standard deviation.
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Tanh(Var),
    LogClamped(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Pick(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

static EMPTY_STORE: ParamStore = ParamStore::new();

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok((t.rows(), t.cols()))
    } else {
        Err(Error::shape(op, t.shape(), &[0, 0]))
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// A tape with no parameters; useful for differentiating plain inputs.
    pub fn detached() -> Tape<'static> {
        Tape::new(&EMPTY_STORE)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param, &[]);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a), "matmul")?;
        let (k2, n) = dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_kernel(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a), "matmul_bt")?;
        let (n, k2) = dims(self.value(b), "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_bt_kernel(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_row(&self, a: Var, row: Var, op: &'static str) -> Result<usize> {
        let (_, n) = dims(self.value(a), op)?;
        if self.shape(row) != [1, n] {
            return Err(Error::shape(op, self.shape(a), self.shape(row)));
        }
        Ok(n)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.check_row(a, row, "add_row")?;
        let mut out = self.value(a).clone();
        if n > 0 {
            let r = self.value(row).data().to_vec();
            for chunk in out.data_mut().chunks_mut(n) {
                chunk.iter_mut().zip(&r).for_each(|(o, x)| *o += x);
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` element-wise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.check_row(a, row, "mul_row")?;
        let mut out = self.value(a).clone();
        if n > 0 {
            let r = self.value(row).data().to_vec();
            for chunk in out.data_mut().chunks_mut(n) {
                chunk.iter_mut().zip(&r).for_each(|(o, x)| *o *= x);
            }
        }
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a), "layer_norm")?;
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(m);
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * r);
                inv_std.push(r);
            }
        }
        Ok(self.push(out, Op::LayerNorm(a, inv_std), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            let u = GELU_C * (*x + GELU_A * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    /// `ln(max(a, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(floor).ln());
        self.push(out, Op::LogClamped(a, floor), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let (m, _) = dims(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims(self.value(p), "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, n) = dims(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = dims(self.value(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a), "slice_cols")?;
        if start > end || end > n {
            return Err(Error::Usage(format!("slice_cols {start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a), "slice_rows")?;
        if start > end || end > m {
            return Err(Error::Usage(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = dims(self.value(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Usage(format!("row index {bad} out of range for {m} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Column means as a `1 × n` row. Requires at least one row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a), "mean_rows")?;
        if m == 0 {
            return Err(Error::Usage("mean_rows of an empty matrix".into()));
        }
        let mut acc = vec![0.0; n];
        for row in self.value(a).data().chunks(n.max(1)) {
            acc.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        acc.iter_mut().for_each(|s| *s /= m as f64);
        Ok(self.push(Tensor::row(acc), Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// The single entry `a[r, c]` as a scalar.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a), "pick")?;
        if r >= m || c >= n {
            return Err(Error::Usage(format!("pick ({r}, {c}) outside {m}x{n}")));
        }
        let v = self.value(a).at(r, c);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, r, c), &[a]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].as_ref().map(|_| (id, v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, t: Tensor| accumulate(grads, v, t);

        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    matmul_bt_kernel(g.data(), val(b).data(), ga.data_mut(), m, n, k);
                    send(a, ga);
                }
                if wants(b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    matmul_at_kernel(val(a).data(), g.data(), gb.data_mut(), m, k, n);
                    send(b, gb);
                }
            }
            &Op::MatMulBt(a, b) => {
                // out = a · bᵀ, a: m×k, b: n×k
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if wants(a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    matmul_kernel(g.data(), val(b).data(), ga.data_mut(), m, n, k);
                    send(a, ga);
                }
                if wants(b) {
                    let mut gb = Tensor::zeros(&[n, k]);
                    matmul_at_kernel(g.data(), val(a).data(), gb.data_mut(), m, n, k);
                    send(b, gb);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    send(a, g.clone());
                }
                if wants(b) {
                    send(b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    send(a, g.clone());
                }
                if wants(b) {
                    send(b, map(g, |x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    send(a, zip(g, val(b), |x, y| x * y));
                }
                if wants(b) {
                    send(b, zip(g, val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                if wants(a) {
                    send(a, g.clone());
                }
                if wants(row) {
                    send(row, column_sums(g));
                }
            }
            &Op::MulRow(a, row) => {
                let n = g.cols();
                if wants(a) {
                    let r = val(row).data();
                    let mut ga = g.clone();
                    if n > 0 {
                        for chunk in ga.data_mut().chunks_mut(n) {
                            chunk.iter_mut().zip(r).for_each(|(x, y)| *x *= y);
                        }
                    }
                    send(a, ga);
                }
                if wants(row) {
                    send(row, column_sums(&zip(g, val(a), |x, y| x * y)));
                }
            }
            &Op::Scale(a, c) => send(a, map(g, |x| x * c)),
            &Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = g.data()[i * n + j];
                    }
                }
                send(a, Tensor::new(vec![n, m], data)?);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut ga = Tensor::zeros(y.shape());
                if n > 0 {
                    for ((gr, yr), out) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                }
                send(a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.cols();
                let mut ga = Tensor::zeros(y.shape());
                if n > 0 {
                    for (((gr, yr), out), r) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = r * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
                send(*a, ga);
            }
            &Op::Gelu(a) => {
                let d = map(val(a), |x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                send(a, zip(g, &d, |x, y| x * y));
            }
            &Op::Tanh(a) => send(a, zip(g, &node.value, |x, t| x * (1.0 - t * t))),
            &Op::LogClamped(a, floor) => {
                send(a, zip(g, val(a), |x, v| if v > floor { x / v } else { 0.0 }));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        send(p, Tensor::new(vec![m, w], data)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if wants(p) {
                        let data = g.data()[offset * n..(offset + h) * n].to_vec();
                        send(p, Tensor::new(vec![h, n], data)?);
                    }
                    offset += h;
                }
            }
            &Op::SliceCols(a, start) => {
                let (m, n) = (val(a).rows(), val(a).cols());
                let w = g.cols();
                let mut ga = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    ga.data_mut()[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                send(a, ga);
            }
            &Op::SliceRows(a, start) => {
                let n = val(a).cols();
                let mut ga = Tensor::zeros(val(a).shape());
                let h = g.rows();
                ga.data_mut()[start * n..(start + h) * n].copy_from_slice(g.data());
                send(a, ga);
            }
            Op::Gather(table, ids) => {
                let n = val(*table).cols();
                let mut gt = Tensor::zeros(val(*table).shape());
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[i * n..(i + 1) * n];
                    dst.iter_mut().zip(&g.data()[r * n..(r + 1) * n]).for_each(|(d, x)| *d += x);
                }
                send(*table, gt);
            }
            &Op::MeanRows(a) => {
                let m = val(a).rows();
                let row: Vec<f64> = g.data().iter().map(|x| x / m as f64).collect();
                let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                send(a, Tensor::new(val(a).shape().to_vec(), data)?);
            }
            &Op::Sum(a) => send(a, Tensor::full(val(a).shape(), g.data()[0])),
            &Op::Pick(a, r, c) => {
                let mut ga = Tensor::zeros(val(a).shape());
                let n = ga.cols();
                ga.data_mut()[r * n + c] = g.data()[0];
                send(a, ga);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|x| f(*x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut acc = vec![0.0; n];
    if n > 0 {
        for row in g.data().chunks(n) {
            acc.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
    }
    Tensor::row(acc)
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of each parameter bound on the tape, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds `scale · d(loss)/d(param)` to each parameter's accumulator.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in self.param_grads() {
            let acc = &mut store.get_mut(id).grad;
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += scale * x);
        }
    }
}
