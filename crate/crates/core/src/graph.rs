//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node; creation order is already
//! a topological order, so backward is a single reverse walk. Handles are
//! `Copy` indices ([`Var`]). Each training step builds a fresh graph, runs
//! [`Graph::backward`] once, harvests leaf gradients, and drops the graph.
//!
//! All values are rank-2 (rows x cols); scalars are 1x1. Ops with a cheap
//! closed-form VJP are fused ([`Graph::attn_softmax`], [`Graph::layer_norm`],
//! [`Graph::log_softmax_rows`]) so attention never materializes more than one
//! score-sized matrix per head.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::kernels;
use crate::{arg_err, shape_err, Result, Tensor};

/// Handle to a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Const,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleConst(Var, f64),
    ScaleScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    L2NormRows { x: Var, eps: f64 },
    SumAll(Var),
    MeanAll(Var),
    GatherRows { x: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RotateRows { x: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>> },
    AttnSoftmax { q: Var, k: Var, scale: f64, bias: Rc<Vec<f64>> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: None,
            needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err!("leaf {rows}x{cols} with {} values", data.len()));
        }
        Ok(self.push(rows, cols, data, true, Op::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        self.leaf(r, c, t.data().to_vec())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err!("const {rows}x{cols} with {} values", data.len()));
        }
        Ok(self.push(rows, cols, data, false, Op::Const))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        self.constant(r, c, t.data().to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, needs, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; m * n];
        kernels::transpose(self.value(x), &mut out, m, n);
        let needs = self.needs(x);
        self.push(n, m, out, needs, Op::Transpose(x))
    }

    fn zip_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a);
        if (m, n) != self.dims(b) {
            return Err(shape_err!("{what} {m}x{n} vs {:?}", self.dims(b)));
        }
        Ok((m, n))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.zip_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.zip_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, needs, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.zip_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, needs, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| -v).collect();
        let needs = self.needs(x);
        self.push(m, n, out, needs, Op::Neg(x))
    }

    /// Add a 1xN row vector to every row of an MxN matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != n {
            return Err(shape_err!("add_row {m}x{n} with {br}x{bc}"));
        }
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(m, n, out, needs, Op::AddRow(x, b)))
    }

    /// Scale row i of an MxN matrix by c[i] (c is Mx1).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (cr, cc) = self.dims(c);
        if cr != m || cc != 1 {
            return Err(shape_err!("mul_col {m}x{n} with {cr}x{cc}"));
        }
        let cv = self.value(c).to_vec();
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= cv[i];
            }
        }
        let needs = self.needs(x) || self.needs(c);
        Ok(self.push(m, n, out, needs, Op::MulCol(x, c)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * s).collect();
        let needs = self.needs(x);
        self.push(m, n, out, needs, Op::ScaleConst(x, s))
    }

    /// Multiply every element of x by a 1x1 scalar node.
    pub fn scale_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sr, sc) = self.dims(s);
        if (sr, sc) != (1, 1) {
            return Err(shape_err!("scale_scalar wants 1x1 scalar, got {sr}x{sc}"));
        }
        let sv = self.value(s)[0];
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(m, n, out, needs, Op::ScaleScalar(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| crate::fm::exp(*v)).collect();
        let needs = self.needs(x);
        self.push(m, n, out, needs, Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| kernels::gelu(*v)).collect();
        let needs = self.needs(x);
        self.push(m, n, out, needs, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; m * n];
        kernels::softmax_rows(self.value(x), &mut out, m, n)?;
        let needs = self.needs(x);
        Ok(self.push(m, n, out, needs, Op::SoftmaxRows(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; m * n];
        kernels::log_softmax_rows(self.value(x), &mut out, m, n)?;
        let needs = self.needs(x);
        Ok(self.push(m, n, out, needs, Op::LogSoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (gr, gc) = self.dims(gamma);
        let (br, bc) = self.dims(beta);
        if gr != 1 || gc != n || br != 1 || bc != n {
            return Err(shape_err!("layer_norm {m}x{n} gamma {gr}x{gc} beta {br}x{bc}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::layer_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
            m,
            n,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(m, n, out, needs, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; m * n];
        kernels::l2_normalize_rows(self.value(x), eps, m, n, &mut out);
        let needs = self.needs(x);
        self.push(m, n, out, needs, Op::L2NormRows { x, eps })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(1, 1, vec![s], needs, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        self.push(1, 1, vec![s], needs, Op::MeanAll(x))
    }

    /// Select rows by index (with repetition allowed).
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(arg_err!("gather_rows id {i} out of {m} rows"));
            }
            out.extend_from_slice(&self.value(x)[i * n..(i + 1) * n]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            ids.len(),
            n,
            out,
            needs,
            Op::GatherRows { x, ids: ids.to_vec() },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(arg_err!("concat_rows of nothing"));
        }
        let n = self.cols(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(shape_err!("concat_rows widths {n} vs {pn}"));
            }
            rows += pm;
            out.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        Ok(self.push(rows, n, out, needs, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(arg_err!("concat_cols of nothing"));
        }
        let m = self.rows(parts[0]);
        let mut total = 0;
        let mut needs = false;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(shape_err!("concat_cols heights {m} vs {pm}"));
            }
            total += pn;
            needs |= self.needs(p);
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let pn = self.cols(p);
            for i in 0..m {
                out[i * total + off..i * total + off + pn]
                    .copy_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        Ok(self.push(m, total, out, needs, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return Err(shape_err!("slice_rows {start}+{len} out of {m}"));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(len, n, out, needs, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(shape_err!("slice_cols {start}+{len} out of {n}"));
        }
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(x)[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(m, len, out, needs, Op::SliceCols { x, start }))
    }

    /// Pairwise 2D rotation: columns (2k, 2k+1) of each row are rotated by the
    /// angle whose cos/sin are given per element (same shape as x, with the
    /// cos/sin tables repeating each angle across its pair).
    pub fn rotate_rows(&mut self, x: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n % 2 != 0 || cos.len() != m * n || sin.len() != m * n {
            return Err(shape_err!("rotate_rows {m}x{n} cos {} sin {}", cos.len(), sin.len()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..n / 2 {
                let a = i * n + 2 * k;
                let (c, s) = (cos[a], sin[a]);
                out[a] = xv[a] * c - xv[a + 1] * s;
                out[a + 1] = xv[a] * s + xv[a + 1] * c;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(m, n, out, needs, Op::RotateRows { x, cos, sin }))
    }

    /// Fused masked attention scores: softmax over rows of
    /// `scale * (q @ k^T) + bias`, where `bias` is a constant (additive mask
    /// plus positional bias). Only the softmax output is kept on the tape.
    pub fn attn_softmax(&mut self, q: Var, k: Var, scale: f64, bias: Rc<Vec<f64>>) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, d2) = self.dims(k);
        if d != d2 {
            return Err(shape_err!("attn_softmax q {nq}x{d} k {nk}x{d2}"));
        }
        if bias.len() != nq * nk {
            return Err(shape_err!("attn_softmax bias {} wants {}", bias.len(), nq * nk));
        }
        let mut scores = bias.as_ref().clone();
        // scores = bias + scale * q k^T, done row-blockwise to reuse kernels
        let mut qk = vec![0.0; nq * nk];
        kernels::matmul_a_bt(self.value(q), self.value(k), &mut qk, nq, d, nk);
        for (s, v) in scores.iter_mut().zip(qk.iter()) {
            *s += scale * v;
        }
        drop(qk);
        let mut out = vec![0.0; nq * nk];
        kernels::softmax_rows(&scores, &mut out, nq, nk)?;
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(nq, nk, out, needs, Op::AttnSoftmax { q, k, scale, bias }))
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
            *gi += ci;
        }
    }

    /// Reverse sweep from a scalar loss. Leaf gradients are then available
    /// through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (m, n) = self.dims(loss);
        if m * n != 1 {
            return Err(arg_err!("backward from non-scalar {m}x{n}"));
        }
        if !self.needs(loss) {
            return Err(arg_err!("backward from a graph with no differentiable leaves"));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs {
                continue;
            }
            self.step_back(idx)?;
        }
        Ok(())
    }

    fn step_back(&mut self, idx: usize) -> Result<()> {
        let g = self.nodes[idx].grad.clone().expect("grad present");
        let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
        // Each arm computes contributions from immutable borrows first, then
        // accumulates them, so value reads never alias grad writes.
        match &self.nodes[idx].op {
            Op::Leaf | Op::Const => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let k = self.cols(a);
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_a_bt(&g, self.value(b), &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_b(self.value(a), &g, &mut db, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                let mut dx = vec![0.0; m * n];
                kernels::transpose(&g, &mut dx, m, n);
                self.add_grad(x, &dx);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(gi, bi)| gi * bi).collect();
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(gi, ai)| gi * ai).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Neg(x) => {
                let x = *x;
                let dx: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(x, &dx);
            }
            Op::AddRow(x, b) => {
                let (x, b) = (*x, *b);
                self.add_grad(x, &g);
                if self.needs(b) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::MulCol(x, c) => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let cv = self.value(c);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] * cv[i];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.needs(c) {
                    let xv = self.value(x);
                    let mut dc = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            dc[i] += g[i * n + j] * xv[i * n + j];
                        }
                    }
                    self.add_grad(c, &dc);
                }
            }
            Op::ScaleConst(x, s) => {
                let (x, s) = (*x, *s);
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.add_grad(x, &dx);
            }
            Op::ScaleScalar(x, s) => {
                let (x, s) = (*x, *s);
                if self.needs(x) {
                    let sv = self.value(s)[0];
                    let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.add_grad(x, &dx);
                }
                if self.needs(s) {
                    let ds: f64 = g.iter().zip(self.value(x)).map(|(gi, xi)| gi * xi).sum();
                    self.add_grad(s, &[ds]);
                }
            }
            Op::Exp(x) => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[idx].value.iter())
                    .map(|(gi, yi)| gi * yi)
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(gi, xi)| gi * kernels::gelu_grad(*xi))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let dx = softmax_vjp(&g, &self.nodes[idx].value, m, n);
                self.add_grad(x, &dx);
            }
            Op::LogSoftmaxRows(x) => {
                let x = *x;
                let y = &self.nodes[idx].value;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let gsum: f64 = g[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = g[i * n + j] - crate::fm::exp(y[i * n + j]) * gsum;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xv = self.value(x);
                let gv = self.value(gamma);
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let (mean, rstd) = kernels::layer_norm_stats(row, eps);
                    let mut sum_h = 0.0;
                    let mut sum_hx = 0.0;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * rstd;
                        let h = grow[j] * gv[j];
                        sum_h += h;
                        sum_hx += h * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    let inv = 1.0 / n as f64;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * rstd;
                        let h = grow[j] * gv[j];
                        dx[i * n + j] = rstd * (h - inv * sum_h - xhat * inv * sum_hx);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::L2NormRows { x, eps } => {
                let (x, eps) = (*x, *eps);
                let xv = self.value(x);
                let yv = &self.nodes[idx].value;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let yrow = &yv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let norm = kernels::row_norm(row);
                    if norm > eps {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            dx[i * n + j] = grow[j] / eps;
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::SumAll(x) => {
                let x = *x;
                let len = self.nodes[x.0].value.len();
                let dx = vec![g[0]; len];
                self.add_grad(x, &dx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let len = self.nodes[x.0].value.len();
                let dx = vec![g[0] / len.max(1) as f64; len];
                self.add_grad(x, &dx);
            }
            Op::GatherRows { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                let (xm, xn) = self.dims(x);
                let mut dx = vec![0.0; xm * xn];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..xn {
                        dx[i * xn + j] += g[r * xn + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (pm, pn) = self.dims(p);
                    let dx = g[off..off + pm * pn].to_vec();
                    self.add_grad(p, &dx);
                    off += pm * pn;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (pm, pn) = self.dims(p);
                    let mut dx = vec![0.0; pm * pn];
                    for i in 0..pm {
                        dx[i * pn..(i + 1) * pn]
                            .copy_from_slice(&g[i * n + off..i * n + off + pn]);
                    }
                    self.add_grad(p, &dx);
                    off += pn;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let (xm, xn) = self.dims(x);
                let mut dx = vec![0.0; xm * xn];
                dx[start * xn..start * xn + g.len()].copy_from_slice(&g);
                self.add_grad(x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let (xm, xn) = self.dims(x);
                let mut dx = vec![0.0; xm * xn];
                for i in 0..m {
                    dx[i * xn + start..i * xn + start + n].copy_from_slice(&g[i * n..(i + 1) * n]);
                }
                self.add_grad(x, &dx);
            }
            Op::RotateRows { x, cos, sin } => {
                let x = *x;
                let cos = Rc::clone(cos);
                let sin = Rc::clone(sin);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for k in 0..n / 2 {
                        let a = i * n + 2 * k;
                        let (c, s) = (cos[a], sin[a]);
                        dx[a] = g[a] * c + g[a + 1] * s;
                        dx[a + 1] = -g[a] * s + g[a + 1] * c;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::AttnSoftmax { q, k, scale, .. } => {
                let (q, k, scale) = (*q, *k, *scale);
                let ds = softmax_vjp(&g, &self.nodes[idx].value, m, n);
                let d = self.cols(q);
                if self.needs(q) {
                    let mut dq = vec![0.0; m * d];
                    kernels::matmul(&ds, self.value(k), &mut dq, m, n, d);
                    dq.iter_mut().for_each(|v| *v *= scale);
                    self.add_grad(q, &dq);
                }
                if self.needs(k) {
                    let mut dk = vec![0.0; n * d];
                    kernels::matmul_at_b(&ds, self.value(q), &mut dk, m, n, d);
                    dk.iter_mut().for_each(|v| *v *= scale);
                    self.add_grad(k, &dk);
                }
            }
        }
        Ok(())
    }
}

fn softmax_vjp(g: &[f64], y: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; m * n];
    for i in 0..m {
        let yrow = &y[i * n..(i + 1) * n];
        let grow = &g[i * n..(i + 1) * n];
        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dx[i * n + j] = yrow[j] * (grow[j] - dot);
        }
    }
    dx
}

/// Finite-difference gradient check.
///
/// `build` maps leaf vars (one per input tensor, in order) to a scalar loss.
/// Analytic gradients come from one backward pass; the reference is a central
/// difference with step `h` recomputed through fresh forward passes. Returns
/// the maximum scaled error `|a - f| / max(|a|, |f|, 1)` over all elements.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let forward = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf_tensor(t))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf_tensor(t))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let fp = forward(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let fm = forward(&work)?;
            work[ti].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = grads[ti][ei];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
