//! Named parameter storage, gradient buffers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    lookup: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Glorot-uniform initialised weight.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit));
        self.insert(name, m)
    }

    pub fn insert_gaussian<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let m = Matrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.insert(name, m)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn to_named(&self) -> BTreeMap<String, Matrix> {
        self.iter().map(|(n, m)| (n.to_string(), m.clone())).collect()
    }

    /// Overwrite values from a named map. Every parameter must be present with
    /// the same shape and no extra names are allowed.
    pub fn load_named(&mut self, named: &BTreeMap<String, Matrix>) -> Result<(), String> {
        if named.len() != self.values.len() {
            return Err(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                named.len(),
                self.values.len()
            ));
        }
        for (i, name) in self.names.iter().enumerate() {
            let m = named
                .get(name)
                .ok_or_else(|| format!("checkpoint is missing parameter {name}"))?;
            if m.shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                    m.shape(),
                    self.values[i].shape()
                ));
            }
            self.values[i] = m.clone();
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    values: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.values {
            m.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn clear(&mut self) {
        for m in &mut self.values {
            m.as_mut_slice().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = store
            .values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = grads.values[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (k, p) in value.as_mut_slice().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::row_vector(&[1.0, -1.0]));
        let mut grads = store.zero_grads();
        grads.get_mut(id).as_mut_slice().copy_from_slice(&[2.0, -3.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &grads);
        let w = store.get(id);
        // first Adam step has magnitude lr in every coordinate
        assert!((w.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w.get(0, 1) - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn load_named_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.insert_zeros("a", 2, 2);
        let mut named = BTreeMap::new();
        named.insert("a".to_string(), Matrix::zeros(3, 2));
        assert!(store.load_named(&named).is_err());
    }
}
