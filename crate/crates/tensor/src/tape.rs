//! Record-on-execute gradient tape.
//!
//! Every op computes its value eagerly and appends a node. Node inputs always
//! precede the node itself, so walking the node list backwards is a valid
//! reverse topological order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    DivBy(Var, Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    Select(Var, usize),
    Softplus(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn watch(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf { param: None }, true)
    }

    /// A leaf bound to slot `index` of the parameter slice later handed to
    /// [`Tape::backward_into`].
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf { param: Some(index) }, true)
    }

    /// Copies the value of `v` into a fresh constant; nothing flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2("transpose", t)?;
        let out = kernels::transpose(t.data(), r, c);
        let ng = self.needs(&[x]);
        Ok(self.push(tensor(vec![c, r], out), Op::Transpose(x), ng))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((tensor(ta.shape().to_vec(), data), self.needs(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = dims2("add_row", tx)?;
        if tb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let t = tensor(tx.shape().to_vec(), data);
        let ng = self.needs(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = tensor(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect());
        let ng = self.needs(&[x]);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                left: self.value(x).shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let c = ts.item();
        let tx = self.value(x);
        let t = tensor(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect());
        let ng = self.needs(&[x, s]);
        Ok(self.push(t, Op::ScaleBy(x, s), ng))
    }

    /// Divides every element of `x` by the single element of `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "div_by",
                left: self.value(x).shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let c = ts.item();
        let tx = self.value(x);
        let t = tensor(tx.shape().to_vec(), tx.data().iter().map(|v| v / c).collect());
        let ng = self.needs(&[x, s]);
        Ok(self.push(t, Op::DivBy(x, s), ng))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = tensor(tx.shape().to_vec(), tx.data().iter().map(|v| 1.0 / v).collect());
        let ng = self.needs(&[x]);
        self.push(t, Op::Recip(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let tx = self.value(x);
        if i >= tx.numel() {
            return Err(TensorError::Index {
                op: "select",
                index: i,
                limit: tx.numel(),
            });
        }
        let v = tx.data()[i];
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Select(x, i), ng))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = tensor(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| kernels::softplus(*v)).collect(),
        );
        let ng = self.needs(&[x]);
        self.push(t, Op::Softplus(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = tensor(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| kernels::gelu(*v)).collect(),
        );
        let ng = self.needs(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(tensor(shape, out), Op::Softmax { x, axis }, ng))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: vec![],
        })?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: tx.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = tensor(tx.shape().to_vec(), out);
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout with drop probability `p`; the mask is a pure
    /// function of `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let tx = self.value(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = tensor(tx.shape().to_vec(), data);
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Rows `indices` of a `V×d` table, stacked into `len×d`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims2("gather_rows", tt)?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    limit: v,
                });
            }
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = tensor(vec![indices.len(), d], out);
        let ng = self.needs(&[table]);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims2("slice_cols", tx)?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(tensor(vec![r, len], out), Op::SliceCols { x, start }, ng))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (rows, _) = dims2("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = dims2("concat_cols", t)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            tensor(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Tiles a vector (or `1×n` matrix) into `rows×n`.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Var {
        let tx = self.value(x);
        let n = tx.numel();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(tx.data());
        }
        let ng = self.needs(&[x]);
        self.push(tensor(vec![rows, n], out), Op::RepeatRows(x), ng)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter leaf's gradient into
    /// the matching slot of `params`. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, params: &mut [Tensor]) -> Result<()> {
        let grads = self.backward(loss)?;
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf { param: Some(slot) } = node.op {
                if let Some(g) = grads.grads[id].as_deref() {
                    let limit = params.len();
                    let p = params.get_mut(slot).ok_or(TensorError::Index {
                        op: "backward_into",
                        index: slot,
                        limit,
                    })?;
                    p.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };

        match &node.op {
            Op::Constant | Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| kernels::gemm_nt_acc(g, bv, da, m, k, n));
                acc(*b, &mut |db| kernels::gemm_tn_acc(av, g, db, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let back = kernels::transpose(g, c, r);
                acc(*x, &mut |dx| add_into(dx, &back));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*b, &mut |db| {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
                acc(*s, &mut |ds| ds[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::DivBy(x, s) => {
                let c = val(*s)[0];
                let xv = val(*x);
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v / c));
                acc(*s, &mut |ds| {
                    ds[0] -= g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>() / (c * c)
                });
            }
            Op::Recip(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] -= g[i] / (xv[i] * xv[i]);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                acc(*x, &mut |dx| {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                });
            }
            Op::Select(x, i) => {
                acc(*x, &mut |dx| dx[*i] += g[0]);
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * kernels::sigmoid(xv[i]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let n = gv.len();
                acc(*x, &mut |dx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let base = r * n;
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            let d = g[base + c] * gv[c];
                            sum_d += d;
                            sum_dh += d * xhat[base + c];
                        }
                        for c in 0..n {
                            let d = g[base + c] * gv[c];
                            dx[base + c] += is / n as f64
                                * (n as f64 * d - sum_d - xhat[base + c] * sum_dh);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (i, gi) in g.iter().enumerate() {
                        dg[i % n] += gi * xhat[i];
                    }
                });
                acc(*bias, &mut |db| {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let d = shape(*table)[1];
                acc(*table, &mut |dt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = shape(*x)[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |dx| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut dx[r * c + start..r * c + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = shape(*p)[1];
                    acc(*p, &mut |dp| {
                        for (r, row) in g.chunks(total).enumerate() {
                            add_into(&mut dp[r * w..(r + 1) * w], &row[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::RepeatRows(x) => {
                acc(*x, &mut |dx| {
                    for row in g.chunks(dx.len()) {
                        add_into(dx, row);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let col = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let p = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1]);
        assert_eq!(tape.value(p).item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 3]));
        let s = tape.softmax(z, 0).unwrap();
        assert!(close(tape.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.softmax(z, 2), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        // var([1,3]) = 1 so eps shifts the result by ~5e-6
        assert!(close(&v[..2], &[-1.0, 1.0], 1e-5));
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.watch(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.watch(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_and_constant_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.watch(Tensor::vector(vec![1.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).is_none());
        assert!(g.wrt(d).is_none());
    }

    #[test]
    fn backward_into_accumulates() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        for _ in 0..2 {
            let mut tape = Tape::new();
            let p = tape.param(0, &params[0]);
            let s = tape.sum(p);
            tape.backward_into(s, &mut params).unwrap();
        }
        assert_eq!(params[0].grad().unwrap(), &[2.0, 2.0]);
        params[0].zero_grad();
        assert_eq!(params[0].grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let a = tape.dropout(x, 0.5, 11).unwrap();
        let b = tape.dropout(x, 0.5, 11).unwrap();
        let c = tape.dropout(x, 0.5, 12).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_ne!(tape.value(a), tape.value(c));
        assert!(tape.value(a).data().iter().all(|v| *v == 0.0 || *v == 2.0));
        let zero = tape.dropout(x, 0.0, 3).unwrap();
        assert_eq!(tape.value(zero).data(), tape.value(x).data());
    }
}
