use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Stts};
use crate::error::{Result, SttsError};
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: &str = "stts-checkpoint/1";

/// Everything needed to rebuild a trained model in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: ModelConfig,
    pub n_series: usize,
    pub graph: Option<Matrix>,
    pub params: BTreeMap<String, Matrix>,
    pub e_time: Matrix,
}

impl Checkpoint {
    pub fn from_model(model: &Stts, graph: Option<&Matrix>) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            config: model.config.clone(),
            n_series: model.n_series,
            graph: graph.filter(|_| model.has_graph()).cloned(),
            params: model.store.to_named(),
            e_time: model.embedding.e_time.clone(),
        }
    }

    /// Rebuilds the model. Fails if the stored parameters do not fit the
    /// stored configuration.
    pub fn to_model(&self) -> Result<Stts> {
        if self.version != CHECKPOINT_VERSION {
            return Err(SttsError::Checkpoint(format!(
                "unsupported checkpoint version {:?}, expected {CHECKPOINT_VERSION:?}",
                self.version
            )));
        }
        let mut model = Stts::new(self.config.clone(), self.n_series, self.graph.as_ref(), 0)
            .map_err(|e| SttsError::Checkpoint(format!("stored config is unusable: {e}")))?;
        model.store.load_named(&self.params).map_err(SttsError::Checkpoint)?;
        if self.e_time.shape() != model.embedding.e_time.shape() {
            return Err(SttsError::Checkpoint(format!(
                "temporal embedding has shape {:?}, model expects {:?}",
                self.e_time.shape(),
                model.embedding.e_time.shape()
            )));
        }
        model.embedding.e_time = self.e_time.clone();
        Ok(model)
    }

    /// Checks that this checkpoint can serve `expected` on a panel of
    /// `n_series` series.
    pub fn check_compatible(&self, expected: &ModelConfig, n_series: usize) -> Result<()> {
        if self.n_series != n_series {
            return Err(SttsError::Checkpoint(format!(
                "checkpoint was trained on {} series, data has {n_series}",
                self.n_series
            )));
        }
        if &self.config != expected {
            let c = &self.config;
            return Err(SttsError::Checkpoint(format!(
                "model config mismatch: checkpoint has window={} n_aux={} d_time={} d_spat={} d_attn={}, \
                 config asks for window={} n_aux={} d_time={} d_spat={} d_attn={}",
                c.window,
                c.n_aux,
                c.d_time,
                c.d_spat,
                c.d_attn,
                expected.window,
                expected.n_aux,
                expected.d_time,
                expected.d_spat,
                expected.d_attn
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| SttsError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| SttsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SttsError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SttsError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            window: 4,
            n_aux: 2,
            d_time: 3,
            d_spat: 2,
            d_attn: 3,
            encoder_hidden: 4,
            lstm_hidden: 3,
            ff_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn graph() -> Matrix {
        Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]])
    }

    #[test]
    fn round_trip_restores_identical_outputs() {
        let g = graph();
        let model = Stts::new(config(), 3, Some(&g), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::from_model(&model, Some(&g)).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.store().to_named(), model.store().to_named());
        assert_eq!(back.momentum(), model.momentum());
        assert_eq!(back.embeddings(), model.embeddings());
    }

    #[test]
    fn wrong_n_aux_fails_loudly() {
        let model = Stts::new(config(), 3, None, 1).unwrap();
        let ck = Checkpoint::from_model(&model, None);
        let other = ModelConfig { n_aux: 3, ..config() };
        let err = ck.check_compatible(&other, 3).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
        assert!(err.to_string().contains("n_aux=2"));

        let mut tampered = ck.clone();
        tampered.config.n_aux = 3;
        assert!(tampered.to_model().is_err());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let model = Stts::new(config(), 3, None, 1).unwrap();
        let mut ck = Checkpoint::from_model(&model, None);
        ck.version = "other/0".into();
        assert!(ck.to_model().is_err());
    }
}
