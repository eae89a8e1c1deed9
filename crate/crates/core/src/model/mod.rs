//! The spatio-temporal forecaster.
//!
//! A forward pass takes the selected block `X'` (`M x P`, target first):
//!
//! 1. embeddings of the selected series (momentum temporal part blended with
//!    the window encoder, plus GCN rows when a graph is present);
//! 2. temporal attention over columns and spatial attention over rows;
//! 3. `[X'; H_time; H_spat]` stacked to `3M x P`, a feature-wise transformer
//!    over those rows and an LSTM along the `P` axis;
//! 4. a linear predictor for the next value and an LSTM decoder that
//!    reconstructs the target window from the final state.

pub mod attention;
mod checkpoint;
pub mod integrate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{SeriesPanel, WindowSample};
use crate::embedding::{
    compute_spatial, fixed_selection, normalized_adjacency, select_auxiliary, MomentumEmbedding, SpatialEncoder,
    TemporalEncoder,
};
use crate::error::{Result, SttsError};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Matrix;

use attention::{spatial_attention, temporal_attention, AttentionParams, SpatialProjection};
use integrate::{LstmParams, TransformerBlock};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

/// Switches for the component ablations. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub aux_selection: bool,
    pub spatial_attention: bool,
    pub temporal_attention: bool,
    pub transformer: bool,
    pub recurrent: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            aux_selection: true,
            spatial_attention: true,
            temporal_attention: true,
            transformer: true,
            recurrent: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `P`
    pub window: usize,
    /// `M`, including the target
    pub n_aux: usize,
    pub d_time: usize,
    pub d_spat: usize,
    /// `d'`
    pub d_attn: usize,
    pub encoder_hidden: usize,
    pub lstm_hidden: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub leaky_slope: f64,
    /// Momentum weight of the temporal embedding.
    pub gamma: f64,
    pub embedding_init_scale: f64,
    pub use_graph: bool,
    pub components: Components,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 14,
            n_aux: 4,
            d_time: 32,
            d_spat: 16,
            d_attn: 32,
            encoder_hidden: 64,
            lstm_hidden: 64,
            heads: 2,
            ff_hidden: 32,
            leaky_slope: 0.2,
            gamma: 0.9,
            embedding_init_scale: 0.1,
            use_graph: true,
            components: Components::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, n_series: usize) -> Result<()> {
        let bad = |m: String| Err(SttsError::Config(m));
        if self.window < 1 {
            return bad("window must be at least 1".into());
        }
        if self.n_aux < 1 || self.n_aux > n_series {
            return bad(format!("n_aux = {} must lie in [1, {n_series}]", self.n_aux));
        }
        for (name, v) in [
            ("d_time", self.d_time),
            ("d_attn", self.d_attn),
            ("encoder_hidden", self.encoder_hidden),
            ("lstm_hidden", self.lstm_hidden),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.use_graph && self.d_spat == 0 {
            return bad("d_spat must be positive when the graph is used".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma = {} must lie in [0, 1]", self.gamma));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in [0, 1)".into());
        }
        if !(self.embedding_init_scale > 0.0) {
            return bad("embedding_init_scale must be positive".into());
        }
        Ok(())
    }
}

/// Result of one evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub prediction: f64,
    pub reconstruction: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub prediction: Var,
    /// `1 x P`
    pub reconstruction: Var,
    pub hidden: Var,
    /// Window-encoder outputs of the selected rows, `M x d_time`.
    pub encoded: Var,
    pub temporal_weights: Option<Var>,
    pub spatial_weights: Option<Var>,
    /// The stacked `kM x P` block before integration.
    pub stacked: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub pred: Var,
    pub rec: Var,
}

/// Per-sample joint loss `(L, L_pred, L_rec)`:
/// `L_pred = |Y - Ŷ|`, `L_rec = sqrt(mean_t (X_t - X̂_t)^2)`,
/// `L = beta L_pred + (1 - beta) L_rec`.
pub fn loss_values(output: &ModelOutput, target_window: &[f64], label: f64, beta: f64) -> (f64, f64, f64) {
    let pred = (label - output.prediction).abs();
    let mse = target_window
        .iter()
        .zip(&output.reconstruction)
        .map(|(x, r)| (x - r).powi(2))
        .sum::<f64>()
        / target_window.len() as f64;
    let rec = mse.sqrt();
    (beta * pred + (1.0 - beta) * rec, pred, rec)
}

#[derive(Debug, Clone)]
struct Heads {
    predictor_w: ParamId,
    predictor_b: ParamId,
    decoder: LstmParams,
    decoder_out_w: ParamId,
    decoder_out_b: ParamId,
}

#[derive(Debug, Clone)]
enum Integrator {
    Recurrent(LstmParams),
    /// Replacement for the LSTM when it is ablated: `tanh(W vec(X̃) + b)`.
    Flat { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
pub struct Stts {
    config: ModelConfig,
    n_series: usize,
    store: ParamStore,
    embedding: MomentumEmbedding,
    a_hat: Option<Matrix>,
    encoder: TemporalEncoder,
    spatial: Option<SpatialEncoder>,
    temporal_attn: Option<AttentionParams>,
    spatial_attn: Option<(AttentionParams, SpatialProjection)>,
    transformer: Option<TransformerBlock>,
    integrator: Integrator,
    heads: Heads,
}

impl Stts {
    /// Builds a freshly initialised model. The graph is used only when
    /// `config.use_graph` is set.
    pub fn new(config: ModelConfig, n_series: usize, graph: Option<&Matrix>, seed: u64) -> Result<Self> {
        config.validate(n_series)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = config.window;
        let a_hat = match (config.use_graph, graph) {
            (true, Some(adj)) => {
                if adj.shape() != (n_series, n_series) {
                    return Err(SttsError::Invalid("graph size does not match series count".into()));
                }
                Some(normalized_adjacency(adj))
            }
            _ => None,
        };
        let d = config.d_time + if a_hat.is_some() { config.d_spat } else { 0 };
        let encoder = TemporalEncoder::new(&mut store, p, config.encoder_hidden, config.d_time, &mut rng);
        let spatial = a_hat
            .as_ref()
            .map(|_| SpatialEncoder::new(&mut store, n_series, config.d_spat, &mut rng));
        let c = config.components;
        let temporal_attn = c
            .temporal_attention
            .then(|| AttentionParams::new(&mut store, "temporal", config.n_aux, config.d_attn, &mut rng));
        let spatial_attn = c.spatial_attention.then(|| {
            let att = AttentionParams::new(&mut store, "spatial", p + d, config.d_attn, &mut rng);
            let proj = SpatialProjection::new(&mut store, p + d, p, &mut rng);
            (att, proj)
        });
        let n_blocks = 1 + c.temporal_attention as usize + c.spatial_attention as usize;
        let tokens = n_blocks * config.n_aux;
        let transformer = c
            .transformer
            .then(|| TransformerBlock::new(&mut store, p, config.heads, config.ff_hidden, &mut rng));
        let h = config.lstm_hidden;
        let integrator = if c.recurrent {
            Integrator::Recurrent(LstmParams::new(&mut store, "encoder_lstm", tokens, h, &mut rng))
        } else {
            Integrator::Flat {
                w: store.insert_glorot("flat.w", tokens * p, h, &mut rng),
                b: store.insert_zeros("flat.b", 1, h),
            }
        };
        let heads = Heads {
            predictor_w: store.insert_glorot("predictor.w", h, 1, &mut rng),
            predictor_b: store.insert_zeros("predictor.b", 1, 1),
            decoder: LstmParams::new(&mut store, "decoder_lstm", 0, h, &mut rng),
            decoder_out_w: store.insert_glorot("decoder.out.w", h, 1, &mut rng),
            decoder_out_b: store.insert_zeros("decoder.out.b", 1, 1),
        };
        let embedding =
            MomentumEmbedding::random(n_series, config.d_time, config.gamma, config.embedding_init_scale, &mut rng);
        Ok(Self {
            config,
            n_series,
            store,
            embedding,
            a_hat,
            encoder,
            spatial,
            temporal_attn,
            spatial_attn,
            transformer,
            integrator,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn zero_grads(&self) -> Grads {
        self.store.zero_grads()
    }

    pub fn momentum(&self) -> &MomentumEmbedding {
        &self.embedding
    }

    pub fn momentum_mut(&mut self) -> &mut MomentumEmbedding {
        &mut self.embedding
    }

    pub fn encoder(&self) -> &TemporalEncoder {
        &self.encoder
    }

    pub fn has_graph(&self) -> bool {
        self.a_hat.is_some()
    }

    /// Width `d` of the spatiotemporal embedding.
    pub fn embedding_dim(&self) -> usize {
        self.config.d_time + if self.has_graph() { self.config.d_spat } else { 0 }
    }

    /// Current spatial embedding, `N x d_spat`.
    pub fn spatial_embeddings(&self) -> Option<Matrix> {
        match (&self.spatial, &self.a_hat) {
            (Some(enc), Some(a_hat)) => Some(compute_spatial(enc, &self.store, a_hat)),
            _ => None,
        }
    }

    /// `E = [E_time | E_spat]` for every series, `N x d`.
    pub fn embeddings(&self) -> Matrix {
        match self.spatial_embeddings() {
            Some(spat) => {
                let d1 = self.config.d_time;
                let d2 = spat.cols();
                Matrix::from_fn(self.n_series, d1 + d2, |i, k| {
                    if k < d1 {
                        self.embedding.e_time.get(i, k)
                    } else {
                        spat.get(i, k - d1)
                    }
                })
            }
            None => self.embedding.e_time.clone(),
        }
    }

    /// Selected series for every target under the current embeddings.
    pub fn selections(&self) -> Result<Vec<Vec<usize>>> {
        let m = self.config.n_aux;
        if !self.config.components.aux_selection {
            return (0..self.n_series).map(|i| fixed_selection(i, self.n_series, m)).collect();
        }
        let e = self.embeddings();
        (0..self.n_series).map(|i| select_auxiliary(i, &e, m)).collect()
    }

    /// Forward pass for the block `x_prime` whose rows are the windows of
    /// `series` (target first).
    pub fn forward(&self, g: &mut Graph<'_>, x_prime: &Matrix, series: &[usize]) -> ForwardVars {
        let cfg = &self.config;
        let (m, p) = x_prime.shape();
        assert_eq!(m, cfg.n_aux, "block has {m} rows, model expects {}", cfg.n_aux);
        assert_eq!(p, cfg.window, "block has {p} columns, model expects {}", cfg.window);
        assert_eq!(series.len(), m);
        let slope = cfg.leaky_slope;
        let x = g.input(x_prime.clone());

        // embeddings of the selected rows; the stored momentum state is a
        // constant, gradients reach the encoder through the fresh term
        let encoded = self.encoder.forward(g, x);
        let blended = g.scale(encoded, 1.0 - cfg.gamma);
        let state = g.input(self.embedding.e_time.gather_rows(series).map(|v| v * cfg.gamma));
        let e_time = g.add(state, blended);
        let emb = match (&self.spatial, &self.a_hat) {
            (Some(enc), Some(a_hat)) => {
                let a = g.input(a_hat.clone());
                let all = enc.forward(g, a);
                let rows = g.gather_rows(all, series);
                g.concat_cols(&[e_time, rows])
            }
            _ => e_time,
        };

        let mut blocks = vec![x];
        let mut temporal_weights = None;
        let mut spatial_weights = None;
        if let Some(params) = &self.temporal_attn {
            let out = temporal_attention(g, x, params, slope);
            blocks.push(out.hidden);
            temporal_weights = Some(out.weights);
        }
        if let Some((params, proj)) = &self.spatial_attn {
            let out = spatial_attention(g, x, emb, params, proj, slope);
            blocks.push(out.hidden);
            spatial_weights = Some(out.weights);
        }
        let stacked = g.concat_rows(&blocks);
        let mixed = match &self.transformer {
            Some(block) => block.forward(g, stacked),
            None => stacked,
        };

        let h = cfg.lstm_hidden;
        let (hidden, cell) = match &self.integrator {
            Integrator::Recurrent(lstm) => {
                let seq = g.transpose(mixed);
                let traj = lstm.run(g, Some(seq), p, None, None);
                (g.slice(traj, p - 1, 1, 0, h), Some(g.slice(traj, p - 1, 1, h, h)))
            }
            Integrator::Flat { w, b } => {
                let (r, c) = g.shape(mixed);
                let flat = g.reshape(mixed, 1, r * c);
                let (w, b) = (g.param(*w), g.param(*b));
                let z = g.affine(flat, w, b);
                (g.tanh(z), None)
            }
        };

        let (pw, pb) = (g.param(self.heads.predictor_w), g.param(self.heads.predictor_b));
        let prediction = g.affine(hidden, pw, pb);

        let dec = self.heads.decoder.run(g, None, p, Some(hidden), cell);
        let dec_h = g.slice(dec, 0, p, 0, h);
        let (ow, ob) = (g.param(self.heads.decoder_out_w), g.param(self.heads.decoder_out_b));
        let rec = g.affine(dec_h, ow, ob);
        let reconstruction = g.transpose(rec);

        ForwardVars {
            prediction,
            reconstruction,
            hidden,
            encoded,
            temporal_weights,
            spatial_weights,
            stacked,
        }
    }

    /// Joint loss on the tape.
    pub fn loss(&self, g: &mut Graph<'_>, out: &ForwardVars, target_window: &[f64], label: f64, beta: f64) -> LossVars {
        let y = g.scalar(label);
        let diff = g.sub(y, out.prediction);
        let pred = g.abs(diff);
        let x = g.input(Matrix::row_vector(target_window));
        let rdiff = g.sub(x, out.reconstruction);
        let sq = g.square(rdiff);
        let mse = g.mean(sq);
        let rec = g.sqrt(mse);
        let a = g.scale(pred, beta);
        let b = g.scale(rec, 1.0 - beta);
        let total = g.add(a, b);
        LossVars { total, pred, rec }
    }

    pub fn output_of(&self, g: &Graph<'_>, vars: &ForwardVars) -> ModelOutput {
        ModelOutput {
            prediction: g.value(vars.prediction).item(),
            reconstruction: g.value(vars.reconstruction).as_slice().to_vec(),
            hidden: g.value(vars.hidden).as_slice().to_vec(),
        }
    }

    /// Evaluation-mode forward for one sample of `panel`.
    pub fn predict(&self, panel: &SeriesPanel, sample: &WindowSample, selection: &[usize]) -> ModelOutput {
        let block = sample.block(panel, selection, self.config.window);
        let mut g = Graph::new(&self.store);
        let vars = self.forward(&mut g, &block, selection);
        self.output_of(&g, &vars)
    }
}
