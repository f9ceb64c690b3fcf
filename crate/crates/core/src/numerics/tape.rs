//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Node ids grow
//! monotonically, so creation order is already a topological order and the
//! backward sweep is a single reverse scan.

use super::tensor::{
    dims2, gelu, gelu_grad, layer_norm_cached, matmul_raw, matmul_ta_raw, softmax_rows, NormCache,
};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Value used by [`Tape::masked_fill`]; far enough below any score that
/// `exp` underflows to exactly zero, while staying finite.
pub const MASK_VALUE: f64 = -1.0e30;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        cache: NormCache,
        beta: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Nll {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of the given length when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Single-owner computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a x bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = dims2(self.value(a))?;
        let (r, c) = dims2(self.value(b))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul{} {:?} x {:?}",
                if trans_b { "_t" } else { "" },
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, trans_b);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var, NumericsError> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_row {:?} + {:?}",
                self.value(a).shape(),
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (t, cache) =
            layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (rows, d) = dims2(self.value(table))?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    index: id,
                    len: rows,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let m = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| NumericsError::ShapeMismatch("empty concat".into()))?,
            )
            .rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = dims2(self.value(p))?;
            if r != m {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat_cols row count {r} vs {m}"
                )));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = dims2(self.value(a))?;
        if start >= end || end > n {
            return Err(NumericsError::ShapeMismatch(format!(
                "slice {start}..{end} of {n} columns"
            )));
        }
        let data = (0..m)
            .flat_map(|i| self.value(a).row(i)[start..end].iter().copied())
            .collect::<Vec<_>>();
        let t = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push(t, Op::SliceCols { a, start }, &[a]))
    }

    /// Replaces entries where `mask` is true with [`MASK_VALUE`].
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        if mask.len() != self.value(a).numel() {
            return Err(NumericsError::ShapeMismatch(format!(
                "mask of {} for {:?}",
                mask.len(),
                self.value(a).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { MASK_VALUE } else { v })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::full(&[1], s), Op::Sum(a), &[a])
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with `None` contribute nothing.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let (m, v) = dims2(self.value(logits))?;
        if targets.len() != m {
            return Err(NumericsError::ShapeMismatch(format!(
                "{} targets for {m} rows",
                targets.len()
            )));
        }
        let probs = softmax_rows(self.value(logits))?.into_data();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(NumericsError::IndexOutOfRange { index: t, len: v });
                }
                // log-softmax computed directly for accuracy at tiny probabilities
                let row = self.value(logits).row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let op = Op::Nll {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::full(&[1], total), op, &[logits]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if *trans_b {
                    // C = A Bᵀ, B is [n,k]
                    self.accumulate(grads, *a, |ga| {
                        add_into(ga, &matmul_raw(g, bv.data(), m, n, k, false));
                    });
                    self.accumulate(grads, *b, |gb| {
                        add_into(gb, &matmul_ta_raw(g, av.data(), m, n, k));
                    });
                } else {
                    self.accumulate(grads, *a, |ga| {
                        add_into(ga, &matmul_raw(g, bv.data(), m, n, k, true));
                    });
                    self.accumulate(grads, *b, |gb| {
                        add_into(gb, &matmul_ta_raw(av.data(), g, m, k, n));
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let n = node.value.cols();
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, gy), yy) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yy * yy);
                    }
                });
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, gy), xx) in ga.iter_mut().zip(g).zip(xs) {
                        *x += gy * gelu_grad(*xx);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let d = node.value.cols();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *beta, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (row, xh) in g.chunks(d).zip(cache.normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxh = vec![0.0; d];
                    for (r, (row, xh)) in g.chunks(d).zip(cache.normalized.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxh[j] = row[j] * gam[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let rs = cache.rstd[r];
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                self.accumulate(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (i, row) in g.chunks(total).enumerate() {
                            add_into(&mut gp[i * c..(i + 1) * c], &row[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { a, start } => {
                let n = self.value(*a).cols();
                let w = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, row) in g.chunks(w).enumerate() {
                        add_into(&mut ga[i * n + start..i * n + start + w], row);
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for ((x, gy), m) in ga.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Nll {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let s = g[0];
                self.accumulate(grads, *logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &mut gl[i * v..(i + 1) * v];
                            for j in 0..v {
                                row[j] += s * probs[i * v + j];
                            }
                            row[t] -= s;
                        }
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
