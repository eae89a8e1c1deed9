use crate::data::WindowSample;
use crate::error::{Result, SttsError};
use crate::model::ModelOutput;

/// Per-point residuals from one frozen-parameter sweep over the training
/// samples. Positions no sample touched stay absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLedger {
    n_series: usize,
    n_timestamps: usize,
    eps_p: Vec<Option<f64>>,
    eps_r_sum: Vec<f64>,
    counts: Vec<u32>,
    finalized: bool,
}

/// Anomaly scores over the panel; `None` marks positions without a score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub n_series: usize,
    pub n_timestamps: usize,
    values: Vec<Option<f64>>,
}

impl ScoreMatrix {
    pub fn from_values(n_series: usize, n_timestamps: usize, values: Vec<Option<f64>>) -> Self {
        assert_eq!(values.len(), n_series * n_timestamps);
        Self {
            n_series,
            n_timestamps,
            values,
        }
    }

    pub fn get(&self, series: usize, t: usize) -> Option<f64> {
        self.values[series * self.n_timestamps + t]
    }

    pub fn series(&self, i: usize) -> &[Option<f64>] {
        &self.values[i * self.n_timestamps..(i + 1) * self.n_timestamps]
    }

    /// `(series, t, score)` for every present position, row-major.
    pub fn present(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(move |(k, v)| v.map(|s| (k / self.n_timestamps, k % self.n_timestamps, s)))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v.map(|s| s * c)).collect(),
            ..self.clone()
        }
    }
}

impl ResidualLedger {
    pub fn new(n_series: usize, n_timestamps: usize) -> Self {
        let n = n_series * n_timestamps;
        Self {
            n_series,
            n_timestamps,
            eps_p: vec![None; n],
            eps_r_sum: vec![0.0; n],
            counts: vec![0; n],
            finalized: false,
        }
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn n_timestamps(&self) -> usize {
        self.n_timestamps
    }

    fn idx(&self, i: usize, t: usize) -> usize {
        i * self.n_timestamps + t
    }

    /// Adds the residuals of one sample. `target_window` is the target's
    /// input window `[t - P, t)` and `label` its value at `t`.
    pub fn accumulate(
        &mut self,
        sample: &WindowSample,
        target_window: &[f64],
        label: f64,
        output: &ModelOutput,
    ) -> Result<()> {
        assert!(!self.finalized, "ledger already finalized");
        let p = target_window.len();
        if output.reconstruction.len() != p {
            return Err(SttsError::Invalid(format!(
                "reconstruction has length {}, window has {p}",
                output.reconstruction.len()
            )));
        }
        let (i, t) = (sample.target_index, sample.timestamp);
        if i >= self.n_series || t >= self.n_timestamps || t < p {
            return Err(SttsError::Invalid(format!("sample ({i}, {t}) outside the ledger")));
        }
        let ep = (label - output.prediction).abs();
        if !ep.is_finite() {
            return Err(SttsError::Numerical(format!("non-finite prediction residual at ({i}, {t})")));
        }
        let k0 = self.idx(i, t);
        self.eps_p[k0] = Some(ep);
        for (k, (x, xh)) in target_window.iter().zip(&output.reconstruction).enumerate() {
            let r = (x - xh).abs();
            if !r.is_finite() {
                return Err(SttsError::Numerical(format!(
                    "non-finite reconstruction residual at ({i}, {})",
                    t - p + k
                )));
            }
            let pos = self.idx(i, t - p + k);
            self.eps_r_sum[pos] += r;
            self.counts[pos] += 1;
        }
        Ok(())
    }

    /// Turns the reconstruction sums into means over covering windows.
    pub fn finalize(&mut self) {
        if self.finalized {
            return;
        }
        for (s, &c) in self.eps_r_sum.iter_mut().zip(&self.counts) {
            if c > 0 {
                *s /= c as f64;
            }
        }
        self.finalized = true;
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn eps_p(&self, i: usize, t: usize) -> Option<f64> {
        self.eps_p[self.idx(i, t)]
    }

    /// Mean reconstruction residual (after [`Self::finalize`]).
    pub fn eps_r(&self, i: usize, t: usize) -> Option<f64> {
        assert!(self.finalized, "ledger not finalized");
        let k = self.idx(i, t);
        (self.counts[k] > 0).then_some(self.eps_r_sum[k])
    }

    pub fn count(&self, i: usize, t: usize) -> u32 {
        self.counts[self.idx(i, t)]
    }

    /// `s = delta eps_p + (1 - delta) eps_r`. A position is scored when every
    /// component with nonzero weight is present.
    pub fn score(&self, delta: f64) -> Result<ScoreMatrix> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(SttsError::Invalid(format!("delta = {delta} must lie in [0, 1]")));
        }
        assert!(self.finalized, "ledger not finalized");
        let mut values = Vec::with_capacity(self.eps_p.len());
        for k in 0..self.eps_p.len() {
            let ep = self.eps_p[k];
            let er = (self.counts[k] > 0).then_some(self.eps_r_sum[k]);
            let s = match (delta > 0.0, delta < 1.0) {
                (true, true) => ep.zip(er).map(|(p, r)| delta * p + (1.0 - delta) * r),
                (true, false) => ep,
                (false, _) => er,
            };
            values.push(s);
        }
        Ok(ScoreMatrix::from_values(self.n_series, self.n_timestamps, values))
    }

    /// Overwrites one position; used by tests and tools that build ledgers
    /// directly.
    pub fn set(&mut self, i: usize, t: usize, eps_p: Option<f64>, eps_r: Option<f64>) {
        let k = self.idx(i, t);
        self.eps_p[k] = eps_p;
        match eps_r {
            Some(r) => {
                self.eps_r_sum[k] = r;
                self.counts[k] = 1;
            }
            None => {
                self.eps_r_sum[k] = 0.0;
                self.counts[k] = 0;
            }
        }
    }

    pub fn mark_finalized(&mut self) {
        self.finalized = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn out(pred: f64, rec: &[f64]) -> ModelOutput {
        ModelOutput {
            prediction: pred,
            reconstruction: rec.to_vec(),
            hidden: vec![],
        }
    }

    #[test]
    fn perfect_model_leaves_zero_residuals() {
        let mut l = ResidualLedger::new(1, 6);
        let x = [0.5, 1.0, -1.0, 2.0, 0.0, 3.0];
        for t in 3..6 {
            l.accumulate(&WindowSample::new(0, t), &x[t - 3..t], x[t], &out(x[t], &x[t - 3..t]))
                .unwrap();
        }
        l.finalize();
        let s = l.score(0.5).unwrap();
        assert!(s.present().all(|(_, _, v)| v == 0.0));
        // t = 5 has no covering window, so only t = 3 and 4 carry both residuals
        assert_eq!(s.present().count(), 2);
    }

    #[test]
    fn single_window_has_count_one() {
        let mut l = ResidualLedger::new(1, 4);
        l.accumulate(&WindowSample::new(0, 3), &[1.0, 2.0, 3.0], 4.0, &out(3.5, &[1.5, 1.0, 3.0]))
            .unwrap();
        l.finalize();
        assert_eq!(l.eps_r(0, 0), Some(0.5));
        assert_eq!(l.eps_r(0, 1), Some(1.0));
        assert_eq!(l.eps_r(0, 2), Some(0.0));
        assert_eq!(l.eps_r(0, 3), None);
        assert_eq!(l.eps_p(0, 3), Some(0.5));
        assert_eq!((0..4).map(|t| l.count(0, t)).collect::<Vec<_>>(), vec![1, 1, 1, 0]);
    }

    #[test]
    fn overlapping_windows_average() {
        // point 2 is covered by windows ending at 3, 4 and 5 with residuals 1, 2, 3
        let mut l = ResidualLedger::new(1, 6);
        let x = [0.0; 6];
        l.accumulate(&WindowSample::new(0, 3), &x[0..3], 0.0, &out(0.0, &[0.0, 0.0, 1.0]))
            .unwrap();
        l.accumulate(&WindowSample::new(0, 4), &x[1..4], 0.0, &out(0.0, &[0.0, 2.0, 0.0]))
            .unwrap();
        l.accumulate(&WindowSample::new(0, 5), &x[2..5], 0.0, &out(0.0, &[3.0, 0.0, 0.0]))
            .unwrap();
        l.finalize();
        assert_eq!(l.eps_r(0, 2), Some(2.0));
        assert_eq!(l.count(0, 2), 3);
    }

    #[test]
    fn score_arithmetic_and_boundaries() {
        let mut l = ResidualLedger::new(1, 3);
        l.set(0, 1, Some(0.2), Some(0.4));
        l.set(0, 0, None, Some(0.7));
        l.mark_finalized();
        assert!((l.score(0.5).unwrap().get(0, 1).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(l.score(0.0).unwrap().get(0, 1), Some(0.4));
        assert_eq!(l.score(1.0).unwrap().get(0, 1), Some(0.2));
        // position 0 has no prediction residual: only scorable at delta = 0
        assert_eq!(l.score(0.0).unwrap().get(0, 0), Some(0.7));
        assert_eq!(l.score(0.5).unwrap().get(0, 0), None);
        assert_eq!(l.score(0.5).unwrap().get(0, 2), None);
        assert!(l.score(1.5).is_err());
    }

    #[test]
    fn non_finite_residual_is_an_error() {
        let mut l = ResidualLedger::new(1, 3);
        let r = l.accumulate(&WindowSample::new(0, 2), &[0.0, 0.0], 0.0, &out(f64::NAN, &[0.0, 0.0]));
        assert_eq!(r.unwrap_err().kind(), "numerical");
    }

    proptest! {
        #[test]
        fn score_is_affine_and_monotone(
            cells in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 12),
            delta in 0.0f64..=1.0,
            bump in 0.0f64..3.0,
            which in 0usize..12,
        ) {
            let mut l = ResidualLedger::new(2, 6);
            for (k, &(p, r)) in cells.iter().enumerate() {
                l.set(k / 6, k % 6, Some(p), Some(r));
            }
            l.mark_finalized();
            let s = l.score(delta).unwrap();
            for (k, &(p, r)) in cells.iter().enumerate() {
                let v = s.get(k / 6, k % 6).unwrap();
                prop_assert!(v >= 0.0);
                prop_assert!((v - (delta * p + (1.0 - delta) * r)).abs() < 1e-12);
            }
            let mut bumped = l.clone();
            let (p, r) = cells[which];
            bumped.set(which / 6, which % 6, Some(p + bump), Some(r + bump));
            let s2 = bumped.score(delta).unwrap();
            for k in 0..12 {
                prop_assert!(s2.get(k / 6, k % 6).unwrap() >= s.get(k / 6, k % 6).unwrap());
            }
        }
    }
}
