//! Feature-wise transformer over the stacked block and the recurrent layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

/// One post-norm encoder layer whose tokens are the rows of the stacked block
/// (width `P`). No positional encoding: the rows are a set.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub heads: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Largest head count `<= requested` that divides `width`.
pub fn effective_heads(width: usize, requested: usize) -> usize {
    (1..=requested.max(1)).rev().find(|h| width % h == 0).unwrap_or(1)
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, heads: usize, ff_hidden: usize, rng: &mut R) -> Self {
        let mut lin = |name: &str, i: usize, o: usize, rng: &mut R| {
            (
                store.insert_glorot(format!("transformer.{name}.w"), i, o, rng),
                store.insert_zeros(format!("transformer.{name}.b"), 1, o),
            )
        };
        let (wq, bq) = lin("q", width, width, rng);
        let (wk, bk) = lin("k", width, width, rng);
        let (wv, bv) = lin("v", width, width, rng);
        let (wo, bo) = lin("o", width, width, rng);
        let (ff1_w, ff1_b) = lin("ff1", width, ff_hidden, rng);
        let (ff2_w, ff2_b) = lin("ff2", ff_hidden, width, rng);
        Self {
            heads: effective_heads(width, heads),
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g: store.insert("transformer.ln1.g", Matrix::filled(1, width, 1.0)),
            ln1_b: store.insert_zeros("transformer.ln1.b", 1, width),
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            ln2_g: store.insert("transformer.ln2.g", Matrix::filled(1, width, 1.0)),
            ln2_b: store.insert_zeros("transformer.ln2.b", 1, width),
        }
    }

    /// Multi-head self-attention over the rows of `x`, before any residual.
    pub fn self_attention(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let width = g.shape(x).1;
        let head_dim = width / self.heads;
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (
            g.param(self.wq),
            g.param(self.bq),
            g.param(self.wk),
            g.param(self.bk),
            g.param(self.wv),
            g.param(self.bv),
            g.param(self.wo),
            g.param(self.bo),
        );
        let q = g.affine(x, wq, bq);
        let k = g.affine(x, wk, bk);
        let v = g.affine(x, wv, bv);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh));
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        g.affine(o, wo, bo)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let attn = self.self_attention(g, x);
        let z = g.add(x, attn);
        let z = self.norm(g, z, self.ln1_g, self.ln1_b);
        let (w1, b1, w2, b2) = (g.param(self.ff1_w), g.param(self.ff1_b), g.param(self.ff2_w), g.param(self.ff2_b));
        let f = g.affine(z, w1, b1);
        let f = g.relu(f);
        let f = g.affine(f, w2, b2);
        let y = g.add(z, f);
        self.norm(g, y, self.ln2_g, self.ln2_b)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(gain);
        let bias = g.param(bias);
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }
}

/// Weights of one LSTM layer; `wx` is absent for input-free recurrences.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub wx: Option<ParamId>,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, n_in: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = (n_in > 0).then(|| store.insert_glorot(format!("{prefix}.wx"), n_in, 4 * hidden, rng));
        let wh = store.insert_glorot(format!("{prefix}.wh"), hidden, 4 * hidden, rng);
        // forget-gate bias starts at 1
        let mut bias = Matrix::zeros(1, 4 * hidden);
        for k in hidden..2 * hidden {
            bias.set(0, k, 1.0);
        }
        let b = store.insert(format!("{prefix}.b"), bias);
        Self { wx, wh, b, hidden }
    }

    /// Runs over the rows of `input` (or `steps` input-free steps); returns
    /// the `steps x 2H` `[h | c]` trajectory.
    pub fn run(&self, g: &mut Graph<'_>, input: Option<Var>, steps: usize, h0: Option<Var>, c0: Option<Var>) -> Var {
        let wh = g.param(self.wh);
        let b = g.param(self.b);
        let (x, wx) = match (input, self.wx) {
            (Some(x), Some(wx)) => (x, g.param(wx)),
            (None, None) => {
                let x = g.input(Matrix::zeros(steps, 0));
                let wx = g.input(Matrix::zeros(0, 4 * self.hidden));
                (x, wx)
            }
            _ => panic!("LSTM input presence does not match its parameters"),
        };
        g.lstm(x, wx, wh, b, h0, c0)
    }
}
