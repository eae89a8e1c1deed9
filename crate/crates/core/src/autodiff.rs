//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read by
//! reference from a [`ParamStore`]; calling [`Graph::backward`] accumulates
//! their gradients into a [`Grads`] buffer. Nodes that do not depend on any
//! parameter are never differentiated.
//!
//! Besides elementwise and linear-algebra primitives the tape has three fused
//! operations used by the forecaster: GATv2-style pairwise attention scores,
//! row-wise layer normalisation, and a whole-sequence LSTM.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct LstmCache {
    hidden: usize,
    /// gate activations per step, `[i | f | g | o]`
    gates: Vec<Vec<f64>>,
    /// cell state per step, index 0 holds the initial state
    cells: Vec<Vec<f64>>,
    /// hidden state per step, index 0 holds the initial state
    hiddens: Vec<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { src: Var, row0: usize, col0: usize },
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    PairScores {
        left: Var,
        right: Var,
        attn: Var,
        slope: f64,
    },
    LayerNormRows(Var, f64),
    Mean(Var),
    Sum(Var),
    Lstm {
        input: Var,
        wx: Var,
        wh: Var,
        bias: Var,
        h0: Option<Var>,
        c0: Option<Var>,
        cache: LstmCache,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Matrix::scalar(value))
    }

    /// Parameter node; repeated calls with the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let rv = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a * W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, a: Var, w: Var, b: Var) -> Var {
        let z = self.matmul(a, w);
        self.add_row(z, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let ng = self.ng(a);
        self.push(value, Op::Elu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice(&mut self, src: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Var {
        let m = self.value(src);
        assert!(row0 + rows <= m.rows() && col0 + cols <= m.cols(), "slice out of bounds");
        let value = Matrix::from_fn(rows, cols, |r, c| m.get(row0 + r, col0 + c));
        let ng = self.ng(src);
        self.push(value, Op::Slice { src, row0, col0 }, ng)
    }

    pub fn slice_cols(&mut self, src: Var, col0: usize, cols: usize) -> Var {
        let rows = self.shape(src).0;
        self.slice(src, 0, rows, col0, cols)
    }

    pub fn slice_rows(&mut self, src: Var, row0: usize, rows: usize) -> Var {
        let cols = self.shape(src).1;
        self.slice(src, row0, rows, 0, cols)
    }

    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Var {
        let value = self.value(src).gather_rows(indices);
        let ng = self.ng(src);
        self.push(value, Op::GatherRows(src, indices.to_vec()), ng)
    }

    /// Same data, new shape (row-major order is kept).
    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Var {
        let value = Matrix::from_vec(rows, cols, self.value(src).as_slice().to_vec());
        let ng = self.ng(src);
        self.push(value, Op::Reshape(src), ng)
    }

    /// GATv2 scores: `out[i][j] = sum_k attn[k] * LeakyReLU(left[i][k] + right[j][k])`.
    ///
    /// With `left = U Wl^T` and `right = U Wr^T` this is
    /// `a^T LeakyReLU(W (u_i ⊕ u_j))` for `W = [Wl | Wr]`.
    pub fn pair_scores(&mut self, left: Var, right: Var, attn: Var, slope: f64) -> Var {
        let l = self.value(left);
        let r = self.value(right);
        let a = self.value(attn);
        let d = l.cols();
        assert_eq!(r.cols(), d, "pair_scores width mismatch");
        assert_eq!(a.shape(), (1, d), "pair_scores attention vector must be 1x{d}");
        let a = a.as_slice();
        let mut value = Matrix::zeros(l.rows(), r.rows());
        for i in 0..l.rows() {
            let li = l.row(i);
            for j in 0..r.rows() {
                let rj = r.row(j);
                let mut s = 0.0;
                for k in 0..d {
                    let z = li[k] + rj[k];
                    s += a[k] * if z > 0.0 { z } else { slope * z };
                }
                value.set(i, j, s);
            }
        }
        let ng = self.ng(left) || self.ng(right) || self.ng(attn);
        self.push(
            value,
            Op::PairScores {
                left,
                right,
                attn,
                slope,
            },
            ng,
        )
    }

    /// Normalise every row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows(a, eps), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Runs an LSTM over the rows of `input` (`steps x in`).
    ///
    /// `wx` is `in x 4H`, `wh` is `H x 4H`, `bias` is `1 x 4H`, gate order
    /// `[input, forget, cell, output]`. Returns a `steps x 2H` matrix whose row
    /// `t` is `[h_t | c_t]`. `input` may have zero columns for an input-free
    /// recurrence. Missing initial states are zero.
    pub fn lstm(
        &mut self,
        input: Var,
        wx: Var,
        wh: Var,
        bias: Var,
        h0: Option<Var>,
        c0: Option<Var>,
    ) -> Var {
        let x = self.value(input);
        let steps = x.rows();
        let n_in = x.cols();
        let whm = self.value(wh);
        let hidden = whm.rows();
        assert_eq!(whm.cols(), 4 * hidden, "wh must be H x 4H");
        assert_eq!(self.shape(wx), (n_in, 4 * hidden), "wx must be in x 4H");
        assert_eq!(self.shape(bias), (1, 4 * hidden), "bias must be 1 x 4H");

        // input contribution for all steps at once
        let mut pre = Matrix::zeros(steps, 4 * hidden);
        if n_in > 0 {
            matmul_acc(x, self.value(wx), &mut pre);
        }
        let b = self.value(bias).as_slice();
        let h_init = match h0 {
            Some(v) => {
                assert_eq!(self.shape(v), (1, hidden));
                self.value(v).as_slice().to_vec()
            }
            None => vec![0.0; hidden],
        };
        let c_init = match c0 {
            Some(v) => {
                assert_eq!(self.shape(v), (1, hidden));
                self.value(v).as_slice().to_vec()
            }
            None => vec![0.0; hidden],
        };

        let mut cache = LstmCache {
            hidden,
            gates: Vec::with_capacity(steps),
            cells: Vec::with_capacity(steps + 1),
            hiddens: Vec::with_capacity(steps + 1),
        };
        cache.hiddens.push(h_init);
        cache.cells.push(c_init);
        let mut out = Matrix::zeros(steps, 2 * hidden);
        let mut z = vec![0.0; 4 * hidden];
        for t in 0..steps {
            z.copy_from_slice(pre.row(t));
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            let h_prev = &cache.hiddens[t];
            for (k, &hv) in h_prev.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (zi, w) in z.iter_mut().zip(whm.row(k)) {
                    *zi += hv * w;
                }
            }
            let mut gates = vec![0.0; 4 * hidden];
            for k in 0..hidden {
                gates[k] = sigmoid(z[k]);
                gates[hidden + k] = sigmoid(z[hidden + k]);
                gates[2 * hidden + k] = z[2 * hidden + k].tanh();
                gates[3 * hidden + k] = sigmoid(z[3 * hidden + k]);
            }
            let c_prev = &cache.cells[t];
            let mut c = vec![0.0; hidden];
            let mut h = vec![0.0; hidden];
            for k in 0..hidden {
                c[k] = gates[hidden + k] * c_prev[k] + gates[k] * gates[2 * hidden + k];
                h[k] = gates[3 * hidden + k] * c[k].tanh();
            }
            let row = out.row_mut(t);
            row[..hidden].copy_from_slice(&h);
            row[hidden..].copy_from_slice(&c);
            cache.gates.push(gates);
            cache.cells.push(c);
            cache.hiddens.push(h);
        }
        let ng = self.ng(input)
            || self.ng(wx)
            || self.ng(wh)
            || self.ng(bias)
            || h0.is_some_and(|v| self.ng(v))
            || c0.is_some_and(|v| self.ng(v));
        self.push(
            out,
            Op::Lstm {
                input,
                wx,
                wh,
                bias,
                h0,
                c0,
                cache,
            },
            ng,
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward_nodes(&self, root: Var) -> Vec<Option<Matrix>> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    /// Accumulate `d root / d param` for every parameter used in the graph.
    pub fn backward(&self, root: Var, out: &mut Grads) {
        let node_grads = self.backward_nodes(root);
        for (pid, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &node_grads[v.0] {
                    out.get_mut(ParamId(pid)).add_assign(g);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                self.acc(grads, a, |ga| matmul_nt_acc(g, bv, ga));
                self.acc(grads, b, |gb| matmul_tn_acc(av, g, gb));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_scaled(g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.acc(grads, *a, |ga| ga.add_assign(&g.zip_map(bv, |x, y| x * y)));
                self.acc(grads, *b, |gb| gb.add_assign(&g.zip_map(av, |x, y| x * y)));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *row, |gr| {
                    let gs = gr.as_mut_slice();
                    for r in 0..g.rows() {
                        for (s, x) in gs.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row).as_slice();
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for ((s, x), w) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv) {
                            *s += x * w;
                        }
                    }
                });
                self.acc(grads, *row, |gr| {
                    let gs = gr.as_mut_slice();
                    for r in 0..g.rows() {
                        for ((s, x), y) in gs.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *s += x * y;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, |ga| ga.add_scaled(g, s));
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let slope = *slope;
                self.acc(grads, *a, |ga| {
                    ga.add_assign(&g.zip_map(av, |gv, x| if x > 0.0 { gv } else { slope * gv }))
                });
            }
            Op::Elu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    ga.add_assign(&g.zip_map(av, |gv, x| if x > 0.0 { gv } else { gv * x.exp() }))
                });
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |ga| {
                    ga.add_assign(&g.zip_map(out, |gv, y| gv * (1.0 - y * y)))
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |ga| {
                    ga.add_assign(&g.zip_map(out, |gv, y| gv * y * (1.0 - y)))
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    ga.add_assign(&g.zip_map(av, |gv, x| gv * x.signum() * (x != 0.0) as u8 as f64))
                });
            }
            Op::Sqrt(a) => {
                // the subgradient at 0 is taken as 0
                self.acc(grads, *a, |ga| {
                    ga.add_assign(&g.zip_map(out, |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 }))
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| ga.add_assign(&g.zip_map(av, |gv, x| 2.0 * gv * x)));
            }
            Op::SoftmaxRows(a) => {
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((s, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *s += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, |ga| ga.add_assign(&g.transpose()));
            }
            Op::ConcatRows(parts) => {
                let mut row0 = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    let cols = g.cols();
                    self.acc(grads, p, |gp| {
                        let src = &g.as_slice()[row0 * cols..(row0 + rows) * cols];
                        for (s, x) in gp.as_mut_slice().iter_mut().zip(src) {
                            *s += x;
                        }
                    });
                    row0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    self.acc(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (s, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[col0..col0 + cols]) {
                                *s += x;
                            }
                        }
                    });
                    col0 += cols;
                }
            }
            Op::Slice { src, row0, col0 } => {
                let (row0, col0) = (*row0, *col0);
                self.acc(grads, *src, |gs| {
                    for r in 0..g.rows() {
                        let dst = &mut gs.row_mut(row0 + r)[col0..col0 + g.cols()];
                        for (s, x) in dst.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                });
            }
            Op::GatherRows(src, indices) => {
                self.acc(grads, *src, |gs| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (s, x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                });
            }
            Op::Reshape(src) => {
                self.acc(grads, *src, |gs| {
                    for (s, x) in gs.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *s += x;
                    }
                });
            }
            Op::PairScores {
                left,
                right,
                attn,
                slope,
            } => {
                let l = self.value(*left);
                let r = self.value(*right);
                let a = self.value(*attn).as_slice();
                let d = l.cols();
                let slope = *slope;
                let mut gl = Matrix::zeros(l.rows(), d);
                let mut gr = Matrix::zeros(r.rows(), d);
                let mut ga = vec![0.0; d];
                for i in 0..l.rows() {
                    for j in 0..r.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let li = l.row(i);
                        let rj = r.row(j);
                        for k in 0..d {
                            let z = li[k] + rj[k];
                            let (act, dact) = if z > 0.0 { (z, 1.0) } else { (slope * z, slope) };
                            ga[k] += gij * act;
                            let dz = gij * a[k] * dact;
                            gl.row_mut(i)[k] += dz;
                            gr.row_mut(j)[k] += dz;
                        }
                    }
                }
                self.acc(grads, *left, |x| x.add_assign(&gl));
                self.acc(grads, *right, |x| x.add_assign(&gr));
                self.acc(grads, *attn, |x| {
                    for (s, v) in x.as_mut_slice().iter_mut().zip(&ga) {
                        *s += v;
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let av = self.value(*a);
                let eps = *eps;
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let x = av.row(r);
                        let n = x.len() as f64;
                        let mean = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y = out.row(r);
                        let gy = g.row(r);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((s, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                            *s += inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let gv = g.item();
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |ga| {
                    for s in ga.as_mut_slice() {
                        *s += gv / n;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, |ga| {
                    for s in ga.as_mut_slice() {
                        *s += gv;
                    }
                });
            }
            Op::Lstm {
                input,
                wx,
                wh,
                bias,
                h0,
                c0,
                cache,
            } => self.lstm_backward(g, *input, *wx, *wh, *bias, *h0, *c0, cache, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        g: &Matrix,
        input: Var,
        wx: Var,
        wh: Var,
        bias: Var,
        h0: Option<Var>,
        c0: Option<Var>,
        cache: &LstmCache,
        grads: &mut [Option<Matrix>],
    ) {
        let hidden = cache.hidden;
        let steps = cache.gates.len();
        let x = self.value(input);
        let n_in = x.cols();
        let wxm = self.value(wx);
        let whm = self.value(wh);

        let mut dz_all = Matrix::zeros(steps, 4 * hidden);
        let mut dh_carry = vec![0.0; hidden];
        let mut dc_carry = vec![0.0; hidden];
        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let c = &cache.cells[t + 1];
            let c_prev = &cache.cells[t];
            let grow = g.row(t);
            let dz = dz_all.row_mut(t);
            for k in 0..hidden {
                let (i, f, gg, o) = (
                    gates[k],
                    gates[hidden + k],
                    gates[2 * hidden + k],
                    gates[3 * hidden + k],
                );
                let tc = c[k].tanh();
                let dh = grow[k] + dh_carry[k];
                let dc = grow[hidden + k] + dc_carry[k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * gg * i * (1.0 - i);
                dz[hidden + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * hidden + k] = dc * i * (1.0 - gg * gg);
                dz[3 * hidden + k] = dh * tc * o * (1.0 - o);
                dc_carry[k] = dc * f;
            }
            // dh_{t-1} = dz * Wh^T
            for (k, carry) in dh_carry.iter_mut().enumerate() {
                *carry = whm.row(k).iter().zip(dz.iter()).map(|(w, d)| w * d).sum();
            }
        }

        self.acc(grads, bias, |gb| {
            let gs = gb.as_mut_slice();
            for t in 0..steps {
                for (s, d) in gs.iter_mut().zip(dz_all.row(t)) {
                    *s += d;
                }
            }
        });
        self.acc(grads, wh, |gw| {
            for t in 0..steps {
                let h_prev = &cache.hiddens[t];
                let dz = dz_all.row(t);
                for (k, &hv) in h_prev.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    for (s, d) in gw.row_mut(k).iter_mut().zip(dz) {
                        *s += hv * d;
                    }
                }
            }
        });
        if n_in > 0 {
            self.acc(grads, wx, |gw| matmul_tn_acc(x, &dz_all, gw));
            self.acc(grads, input, |gi| matmul_nt_acc(&dz_all, wxm, gi));
        }
        if let Some(h0) = h0 {
            self.acc(grads, h0, |gh| {
                for (s, d) in gh.as_mut_slice().iter_mut().zip(&dh_carry) {
                    *s += d;
                }
            });
        }
        if let Some(c0) = c0 {
            self.acc(grads, c0, |gc| {
                for (s, d) in gc.as_mut_slice().iter_mut().zip(&dc_carry) {
                    *s += d;
                }
            });
        }
    }
}
