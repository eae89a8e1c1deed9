//! GATv2-style temporal and spatial attention over the selected block `X'`.
//!
//! Both blocks score pairs of computing units with
//! `p_ij = a^T LeakyReLU(W (u_i ⊕ u_j))`, normalise each row with a softmax
//! and aggregate the units with the resulting weights. Temporal units are the
//! `P` columns of `X'`; spatial units are the `M` rows of `X'` each extended
//! with its series embedding.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// `a` (`1 x d'`) and `W` (`d' x 2 d_u`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w: ParamId,
    pub a: ParamId,
    pub unit_dim: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, unit_dim: usize, d_attn: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert_glorot(format!("{prefix}.w"), d_attn, 2 * unit_dim, rng),
            a: store.insert_glorot(format!("{prefix}.a"), 1, d_attn, rng),
            unit_dim,
        }
    }
}

/// Attention weights over the rows of `units` (`n x d_u`), `n x n`.
pub fn attention_weights(g: &mut Graph<'_>, units: Var, params: &AttentionParams, slope: f64) -> Var {
    let du = params.unit_dim;
    assert_eq!(g.shape(units).1, du, "attention unit width mismatch");
    let w = g.param(params.w);
    let a = g.param(params.a);
    let w_left = g.slice_cols(w, 0, du);
    let w_right = g.slice_cols(w, du, du);
    let wl_t = g.transpose(w_left);
    let wr_t = g.transpose(w_right);
    let left = g.matmul(units, wl_t);
    let right = g.matmul(units, wr_t);
    let scores = g.pair_scores(left, right, a, slope);
    g.softmax_rows(scores)
}

pub struct AttentionOutput {
    pub hidden: Var,
    pub weights: Var,
}

/// `H_time` (`M x P`): column `i` is `ELU(sum_j alpha_ij X'_{:,j})`.
pub fn temporal_attention(g: &mut Graph<'_>, x_prime: Var, params: &AttentionParams, slope: f64) -> AttentionOutput {
    let units = g.transpose(x_prime);
    let weights = attention_weights(g, units, params, slope);
    let agg = g.matmul(weights, units);
    let act = g.elu(agg);
    AttentionOutput {
        hidden: g.transpose(act),
        weights,
    }
}

/// Projection from the aggregated `P + d` unit back to `P`.
#[derive(Debug, Clone, Copy)]
pub struct SpatialProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl SpatialProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, unit_dim: usize, window: usize, rng: &mut R) -> Self {
        Self {
            w: store.insert_glorot("spatial.proj.w", unit_dim, window, rng),
            b: store.insert_zeros("spatial.proj.b", 1, window),
        }
    }
}

/// `H_spat` (`M x P`): row `i` is `ELU(proj(sum_j alpha_ij (X'_{j,:} ⊕ E_j)))`.
pub fn spatial_attention(
    g: &mut Graph<'_>,
    x_prime: Var,
    embeddings: Var,
    params: &AttentionParams,
    projection: &SpatialProjection,
    slope: f64,
) -> AttentionOutput {
    assert_eq!(
        g.shape(x_prime).0,
        g.shape(embeddings).0,
        "spatial attention needs one embedding per selected series"
    );
    let units = g.concat_cols(&[x_prime, embeddings]);
    let weights = attention_weights(g, units, params, slope);
    let agg = g.matmul(weights, units);
    let w = g.param(projection.w);
    let b = g.param(projection.b);
    let proj = g.affine(agg, w, b);
    AttentionOutput {
        hidden: g.elu(proj),
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lrelu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            0.2 * x
        }
    }

    fn elu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp() - 1.0
        }
    }

    /// Scalar-by-scalar transcription of the attention equations: for unit
    /// vectors `u`, weights `W` (`d' x 2du`) and `a`, returns alpha.
    fn oracle_alpha(units: &[Vec<f64>], w: &Matrix, a: &[f64]) -> Vec<Vec<f64>> {
        let n = units.len();
        let mut p = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let cat: Vec<f64> = units[i].iter().chain(&units[j]).copied().collect();
                let mut s = 0.0;
                for (k, ak) in a.iter().enumerate() {
                    let mut z = 0.0;
                    for (c, x) in cat.iter().enumerate() {
                        z += w.get(k, c) * x;
                    }
                    s += ak * lrelu(z);
                }
                p[i][j] = s;
            }
        }
        p.iter()
            .map(|row| {
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(|v| v.exp() / denom).collect()
            })
            .collect()
    }

    fn store_with(du: usize, d_attn: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "att", du, d_attn, &mut rng);
        (store, p)
    }

    #[test]
    fn temporal_attention_matches_scalar_transcription() {
        let (store, params) = store_with(2, 3, 1);
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]]);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = temporal_attention(&mut g, xv, &params, 0.2);
        let cols: Vec<Vec<f64>> = (0..3).map(|c| x.col(c)).collect();
        let alpha = oracle_alpha(&cols, store.get(params.w), store.get(params.a).as_slice());
        let h = g.value(out.hidden);
        for i in 0..3 {
            for m in 0..2 {
                let agg: f64 = (0..3).map(|j| alpha[i][j] * x.get(m, j)).sum();
                assert!((h.get(m, i) - elu(agg)).abs() < 1e-12);
            }
            for j in 0..3 {
                assert!((g.value(out.weights).get(i, j) - alpha[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_attention_matches_scalar_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "att", 4, 3, &mut rng);
        let proj = SpatialProjection::new(&mut store, 4, 2, &mut rng);
        store.get_mut(proj.b).as_mut_slice().copy_from_slice(&[0.1, -0.2]);
        let x = Matrix::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.3, 0.8]]);
        let e = Matrix::from_rows(&[vec![0.2, 0.1], vec![-0.4, 0.9], vec![0.0, -0.6]]);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let ev = g.input(e.clone());
        let out = spatial_attention(&mut g, xv, ev, &params, &proj, 0.2);
        let units: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).iter().chain(e.row(i)).copied().collect()).collect();
        let alpha = oracle_alpha(&units, store.get(params.w), store.get(params.a).as_slice());
        let wp = store.get(proj.w);
        let bp = store.get(proj.b);
        for i in 0..3 {
            let agg: Vec<f64> = (0..4).map(|c| (0..3).map(|j| alpha[i][j] * units[j][c]).sum()).collect();
            for o in 0..2 {
                let z: f64 = (0..4).map(|c| agg[c] * wp.get(c, o)).sum::<f64>() + bp.get(0, o);
                assert!((g.value(out.hidden).get(i, o) - elu(z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_columns_give_uniform_weights() {
        let (store, params) = store_with(3, 4, 3);
        let x = Matrix::from_fn(3, 5, |r, _| r as f64 - 0.7);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let out = temporal_attention(&mut g, xv, &params, 0.2);
        for v in g.value(out.weights).as_slice() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_column_is_its_own_activation() {
        let (store, params) = store_with(2, 4, 4);
        let x = Matrix::from_rows(&[vec![-0.5], vec![1.25]]);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let out = temporal_attention(&mut g, xv, &params, 0.2);
        assert_eq!(g.value(out.weights).as_slice(), &[1.0]);
        assert!((g.value(out.hidden).get(0, 0) - elu(-0.5)).abs() < 1e-15);
        assert_eq!(g.value(out.hidden).get(1, 0), 1.25);
    }

    #[test]
    fn single_series_spatial_output_is_projection_of_its_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "att", 5, 3, &mut rng);
        let proj = SpatialProjection::new(&mut store, 5, 3, &mut rng);
        let x = Matrix::row_vector(&[0.1, 0.2, 0.3]);
        let e = Matrix::row_vector(&[1.0, -1.0]);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let ev = g.input(e.clone());
        let out = spatial_attention(&mut g, xv, ev, &params, &proj, 0.2);
        assert_eq!(g.value(out.weights).as_slice(), &[1.0]);
        let unit = Matrix::row_vector(&[0.1, 0.2, 0.3, 1.0, -1.0]);
        let expected = unit.matmul(store.get(proj.w)).map(elu);
        assert!(g.value(out.hidden).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn identical_series_get_identical_spatial_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let params = AttentionParams::new(&mut store, "att", 4, 3, &mut rng);
        let proj = SpatialProjection::new(&mut store, 4, 2, &mut rng);
        let x = Matrix::from_rows(&[vec![0.3, -0.1], vec![0.9, 0.4], vec![0.3, -0.1]]);
        let e = Matrix::from_rows(&[vec![0.5, 0.5], vec![-0.2, 0.1], vec![0.5, 0.5]]);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let ev = g.input(e);
        let out = spatial_attention(&mut g, xv, ev, &params, &proj, 0.2);
        let h = g.value(out.hidden);
        assert!(h.row(0).iter().zip(h.row(2)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
