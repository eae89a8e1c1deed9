//! Per-series spatiotemporal embeddings and auxiliary-series selection.
//!
//! The temporal part is a momentum state blended with the output of a small
//! feedforward window encoder; the spatial part is a two-layer GCN over the
//! entity graph with learnable node features. Selection ranks series by
//! cosine similarity of the concatenated embeddings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SttsError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Norms below this are treated as zero by [`similarity`].
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

/// One-hidden-layer map from a window of length `P` to `d_time` features.
#[derive(Debug, Clone, Copy)]
pub struct TemporalEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl TemporalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, window: usize, hidden: usize, d_time: usize, rng: &mut R) -> Self {
        Self {
            w1: store.insert_glorot("embed.enc.w1", window, hidden, rng),
            b1: store.insert_zeros("embed.enc.b1", 1, hidden),
            w2: store.insert_glorot("embed.enc.w2", hidden, d_time, rng),
            b2: store.insert_zeros("embed.enc.b2", 1, d_time),
        }
    }

    /// Encodes every row of `windows` (`rows x P`).
    pub fn forward(&self, g: &mut Graph<'_>, windows: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.affine(windows, w1, b1);
        let h = g.tanh(h);
        g.affine(h, w2, b2)
    }

    /// Same map evaluated without a tape.
    pub fn encode(&self, store: &ParamStore, windows: &Matrix) -> Matrix {
        let mut h = windows.matmul(store.get(self.w1));
        add_row_in_place(&mut h, store.get(self.b1));
        let h = h.map(f64::tanh);
        let mut out = h.matmul(store.get(self.w2));
        add_row_in_place(&mut out, store.get(self.b2));
        out
    }
}

fn add_row_in_place(m: &mut Matrix, row: &Matrix) {
    for r in 0..m.rows() {
        for (x, b) in m.row_mut(r).iter_mut().zip(row.as_slice()) {
            *x += b;
        }
    }
}

/// Momentum-updated temporal embedding state, one row per series.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumEmbedding {
    pub e_time: Matrix,
    pub gamma: f64,
}

impl MomentumEmbedding {
    /// Gaussian initialisation with standard deviation `scale`.
    pub fn random<R: Rng>(n_series: usize, d_time: usize, gamma: f64, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale).expect("positive scale");
        Self {
            e_time: Matrix::from_fn(n_series, d_time, |_, _| normal.sample(rng)),
            gamma,
        }
    }

    pub fn d_time(&self) -> usize {
        self.e_time.cols()
    }

    /// `E <- gamma * E + (1 - gamma) * v` for one series.
    pub fn blend(&mut self, series: usize, encoded: &[f64]) -> Result<()> {
        if encoded.len() != self.d_time() {
            return Err(SttsError::Invalid(format!(
                "encoded width {} does not match d_time {}",
                encoded.len(),
                self.d_time()
            )));
        }
        if encoded.iter().any(|v| !v.is_finite()) {
            return Err(SttsError::Numerical(format!("non-finite encoder output for series {series}")));
        }
        let gamma = self.gamma;
        for (e, &v) in self.e_time.row_mut(series).iter_mut().zip(encoded) {
            *e = gamma * *e + (1.0 - gamma) * v;
        }
        Ok(())
    }

    /// Applies one momentum step per series present in `outputs`, using the
    /// mean of that series' encoder outputs in the batch.
    pub fn update_from_outputs(&mut self, outputs: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<()> {
        for (&series, rows) in outputs {
            if rows.is_empty() {
                continue;
            }
            let d = self.d_time();
            let mut mean = vec![0.0; d];
            for r in rows {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= rows.len() as f64;
            }
            self.blend(series, &mean)?;
        }
        Ok(())
    }

    /// Encodes each `(series, window)` pair and applies [`Self::update_from_outputs`].
    pub fn update_temporal(
        &mut self,
        encoder: &TemporalEncoder,
        store: &ParamStore,
        batch: &[(usize, &[f64])],
    ) -> Result<()> {
        let Some(&(_, first)) = batch.first() else {
            return Ok(());
        };
        let window = first.len();
        let mut data = Vec::with_capacity(batch.len() * window);
        for &(_, w) in batch {
            if w.len() != window {
                return Err(SttsError::Invalid("windows in a batch must share one length".into()));
            }
            data.extend_from_slice(w);
        }
        let encoded = encoder.encode(store, &Matrix::from_vec(batch.len(), window, data));
        let mut outputs: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (k, &(series, _)) in batch.iter().enumerate() {
            outputs.entry(series).or_default().push(encoded.row(k).to_vec());
        }
        self.update_from_outputs(&outputs)
    }
}

/// `D^-1/2 (A + I) D^-1/2`. Self loops keep every degree positive.
pub fn normalized_adjacency(adj: &Matrix) -> Matrix {
    let n = adj.rows();
    let mut a = adj.clone();
    for i in 0..n {
        a.set(i, i, a.get(i, i) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt()).collect();
    Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * a.get(i, j) * inv_sqrt[j])
}

/// Two graph-convolution layers over learnable node features.
#[derive(Debug, Clone, Copy)]
pub struct SpatialEncoder {
    pub features: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

impl SpatialEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, n_series: usize, d_spat: usize, rng: &mut R) -> Self {
        Self {
            features: store.insert_gaussian("embed.gcn.features", n_series, d_spat, 0.5, rng),
            w1: store.insert_glorot("embed.gcn.w1", d_spat, d_spat, rng),
            w2: store.insert_glorot("embed.gcn.w2", d_spat, d_spat, rng),
        }
    }

    /// `Â relu(Â X W1) W2`, `N x d_spat`.
    pub fn forward(&self, g: &mut Graph<'_>, a_hat: Var) -> Var {
        let x = g.param(self.features);
        let w1 = g.param(self.w1);
        let w2 = g.param(self.w2);
        let h = g.matmul(a_hat, x);
        let h = g.matmul(h, w1);
        let h = g.relu(h);
        let h = g.matmul(a_hat, h);
        g.matmul(h, w2)
    }
}

/// Evaluates the GCN for the given normalised adjacency.
pub fn compute_spatial(encoder: &SpatialEncoder, store: &ParamStore, a_hat: &Matrix) -> Matrix {
    let mut g = Graph::new(store);
    let a = g.input(a_hat.clone());
    let out = encoder.forward(&mut g, a);
    g.value(out).clone()
}

/// Cosine similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SttsError::Invalid("similarity of vectors with different lengths".into()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < MIN_EMBEDDING_NORM || nb < MIN_EMBEDDING_NORM {
        return Err(SttsError::Numerical("similarity of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The target followed by the `m - 1` most similar other series, by
/// descending similarity with ties broken by ascending index.
pub fn select_auxiliary(target: usize, embeddings: &Matrix, m: usize) -> Result<Vec<usize>> {
    let n = embeddings.rows();
    if m == 0 || m > n {
        return Err(SttsError::Invalid(format!("cannot select {m} series out of {n}")));
    }
    if target >= n {
        return Err(SttsError::Invalid(format!("target {target} out of range")));
    }
    let e_t = embeddings.row(target);
    let mut scored = Vec::with_capacity(n - 1);
    for j in (0..n).filter(|&j| j != target) {
        scored.push((similarity(e_t, embeddings.row(j))?, j));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(m);
    out.push(target);
    out.extend(scored.into_iter().take(m - 1).map(|(_, j)| j));
    Ok(out)
}

/// Selection that ignores embeddings: the target and the next `m - 1` series
/// in cyclic index order.
pub fn fixed_selection(target: usize, n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n || target >= n {
        return Err(SttsError::Invalid(format!("cannot select {m} series out of {n}")));
    }
    Ok((0..m).map(|k| (target + k) % n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn momentum_blend_arithmetic() {
        let mut e = MomentumEmbedding {
            e_time: Matrix::filled(1, 1, 1.0),
            gamma: 0.9,
        };
        e.blend(0, &[0.0]).unwrap();
        assert_abs_diff_eq!(e.e_time.get(0, 0), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn gamma_one_freezes_state() {
        let mut e = MomentumEmbedding {
            e_time: Matrix::row_vector(&[0.3, -0.2]),
            gamma: 1.0,
        };
        for _ in 0..10 {
            e.blend(0, &[100.0, -100.0]).unwrap();
        }
        assert_eq!(e.e_time.row(0), &[0.3, -0.2]);
    }

    #[test]
    fn repeated_constant_updates_converge_geometrically() {
        let mut e = MomentumEmbedding {
            e_time: Matrix::row_vector(&[2.0, -1.0, 0.5]),
            gamma: 0.7,
        };
        let v = [0.25, 0.5, -0.75];
        let mut prev = 0.0f64;
        for k in 0..40 {
            e.blend(0, &v).unwrap();
            let dist: f64 = e.e_time.row(0).iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if k > 0 {
                assert_abs_diff_eq!(dist / prev, 0.7, epsilon = 1e-6);
            }
            prev = dist;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn non_finite_encoder_output_is_an_error() {
        let mut e = MomentumEmbedding {
            e_time: Matrix::zeros(1, 2),
            gamma: 0.5,
        };
        assert!(e.blend(0, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn update_temporal_leaves_absent_series_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = TemporalEncoder::new(&mut store, 4, 8, 3, &mut rng);
        let mut e = MomentumEmbedding::random(3, 3, 0.9, 0.1, &mut rng);
        let before = e.clone();
        let w1 = [0.1, 0.2, 0.3, 0.4];
        let w2 = [0.0, -0.1, 0.5, 0.2];
        e.update_temporal(&enc, &store, &[(0, &w1), (0, &w2)]).unwrap();
        assert_eq!(e.e_time.row(1), before.e_time.row(1));
        assert_eq!(e.e_time.row(2), before.e_time.row(2));
        let f = enc.encode(&store, &Matrix::from_rows(&[w1.to_vec(), w2.to_vec()]));
        for k in 0..3 {
            let mean = (f.get(0, k) + f.get(1, k)) / 2.0;
            assert_abs_diff_eq!(e.e_time.get(0, k), 0.9 * before.e_time.get(0, k) + 0.1 * mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_graph_normalizes_to_identity() {
        let a_hat = normalized_adjacency(&Matrix::zeros(4, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a_hat.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn empty_graph_spatial_rows_depend_only_on_own_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = SpatialEncoder::new(&mut store, 3, 4, &mut rng);
        let a_hat = normalized_adjacency(&Matrix::zeros(3, 3));
        let base = compute_spatial(&enc, &store, &a_hat);
        // perturbing node 2's features leaves rows 0 and 1 unchanged
        store.get_mut(enc.features).row_mut(2)[0] += 1.0;
        let moved = compute_spatial(&enc, &store, &a_hat);
        assert_eq!(base.row(0), moved.row(0));
        assert_eq!(base.row(1), moved.row(1));
        assert_ne!(base.row(2), moved.row(2));
    }

    #[test]
    fn complete_graph_with_identical_features_gives_identical_rows() {
        // Hand computation for N = 3: A + I is all ones, every degree is 3,
        // so every entry of the normalised adjacency is 1/3 and aggregating
        // identical rows returns the same row.
        let mut adj = Matrix::filled(3, 3, 1.0);
        for i in 0..3 {
            adj.set(i, i, 0.0);
        }
        let a_hat = normalized_adjacency(&adj);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(a_hat.get(i, j), 1.0 / 3.0, epsilon = 1e-15);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = SpatialEncoder::new(&mut store, 3, 2, &mut rng);
        *store.get_mut(enc.features) = Matrix::from_rows(&vec![vec![0.4, -0.3]; 3]);
        let out = compute_spatial(&enc, &store, &a_hat);
        let x = Matrix::row_vector(&[0.4, -0.3]);
        let h = x.matmul(store.get(enc.w1)).map(|v| v.max(0.0));
        let expected = h.matmul(store.get(enc.w2));
        for i in 0..3 {
            for k in 0..2 {
                assert_abs_diff_eq!(out.get(i, k), expected.get(0, k), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_nodes_get_identical_spatial_rows() {
        // path 0 - 1 - 2: nodes 0 and 2 are mirror images
        let adj = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        let a_hat = normalized_adjacency(&adj);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = SpatialEncoder::new(&mut store, 3, 3, &mut rng);
        let f = store.get(enc.features).row(0).to_vec();
        store.get_mut(enc.features).row_mut(2).copy_from_slice(&f);
        let out = compute_spatial(&enc, &store, &a_hat);
        assert!(out.row(0).iter().zip(out.row(2)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn similarity_examples() {
        assert_abs_diff_eq!(similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn selection_edge_cases() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(select_auxiliary(1, &e, 1).unwrap(), vec![1]);
        let all = select_auxiliary(2, &e, 3).unwrap();
        assert_eq!(all[0], 2);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(select_auxiliary(0, &e, 4).is_err());
    }

    #[test]
    fn selection_matches_brute_force_ranking_on_four_series() {
        let e = Matrix::from_rows(&[
            vec![1.0, 0.2, 0.0],
            vec![0.9, 0.1, 0.3],
            vec![-1.0, 0.5, 0.0],
            vec![0.5, 0.5, 0.5],
        ]);
        // brute force: every candidate's cosine to the target computed
        // directly, then all orderings enumerated to find the one sorted by
        // descending value
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        for target in 0..4 {
            let others: Vec<usize> = (0..4).filter(|&j| j != target).collect();
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms
                .iter()
                .map(|p| p.map(|k| others[k]))
                .find(|p| {
                    cos(e.row(target), e.row(p[0])) >= cos(e.row(target), e.row(p[1]))
                        && cos(e.row(target), e.row(p[1])) >= cos(e.row(target), e.row(p[2]))
                })
                .unwrap();
            for m in 1..=4 {
                let got = select_auxiliary(target, &e, m).unwrap();
                let mut expected = vec![target];
                expected.extend_from_slice(&best[..m - 1]);
                assert_eq!(got, expected, "target {target} m {m}");
            }
        }
    }

    #[test]
    fn fixed_selection_wraps_around() {
        assert_eq!(fixed_selection(3, 5, 4).unwrap(), vec![3, 4, 0, 1]);
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_bounded_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            sa in 0.01f64..100.0,
            sb in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let s = similarity(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - similarity(&b, &a).unwrap()).abs() < 1e-12);
            let a2: Vec<f64> = a.iter().map(|x| x * sa).collect();
            let b2: Vec<f64> = b.iter().map(|x| x * sb).collect();
            prop_assert!((s - similarity(&a2, &b2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn selection_has_target_first_and_no_duplicates(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 3), 2..7),
            pick in 0usize..7,
            m_pick in 0usize..7,
        ) {
            let e = Matrix::from_rows(&rows);
            let n = e.rows();
            let target = pick % n;
            let m = m_pick % n + 1;
            let sel = select_auxiliary(target, &e, m).unwrap();
            prop_assert_eq!(sel.len(), m);
            prop_assert_eq!(sel[0], target);
            let uniq: std::collections::BTreeSet<_> = sel.iter().collect();
            prop_assert_eq!(uniq.len(), m);
        }

        #[test]
        fn constant_output_contracts_by_gamma(
            start in prop::collection::vec(-3.0f64..3.0, 3),
            v in prop::collection::vec(-3.0f64..3.0, 3),
            gamma in 0.0f64..0.99,
        ) {
            let mut e = MomentumEmbedding { e_time: Matrix::row_vector(&start), gamma };
            let dist = |e: &MomentumEmbedding| e.e_time.row(0).iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let before = dist(&e);
            e.blend(0, &v).unwrap();
            prop_assert!((dist(&e) - gamma * before).abs() < 1e-9);
        }
    }
}
