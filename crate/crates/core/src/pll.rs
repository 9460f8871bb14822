//! Risk-consistent partial-label loss.
//!
//! For an instance with logits `f` and candidate set `Y`,
//!
//! ```text
//! g      = softmax(f)
//! w_i    = g_i / sum_{j in Y} g_j          (i in Y, else 0)
//! loss   = sum_{i in Y} w_i * (-log g_i)
//! ```
//!
//! and the batch loss is the mean over instances. With frozen weights the
//! per-instance gradient is `sum_{i in Y} w_i (g - e_i) = g - w`; the full
//! mode also differentiates through `w`.

use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateLabelSet, N_BEHAVIORS};
use crate::error::{Error, Result};

pub type Logits = [f64; N_BEHAVIORS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightGradient {
    /// Candidate weights are recomputed every pass but treated as constants.
    #[default]
    Frozen,
    /// Gradients also flow through the candidate weights.
    Full,
}

fn log_sum_exp(f: &[f64]) -> f64 {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(f: &Logits) -> Logits {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    std::array::from_fn(|i| e[i] / z)
}

/// `g` with non-candidates zeroed.
pub fn masked_posterior(g: &Logits, set: CandidateLabelSet) -> Logits {
    std::array::from_fn(|i| if set.contains_index(i) { g[i] } else { 0.0 })
}

/// Candidate weights `w_i = g_i / sum_{j in Y} g_j`, computed from logits in
/// log space (softmax restricted to the candidates).
pub fn candidate_weights(f: &Logits, set: CandidateLabelSet) -> Logits {
    let m = f
        .iter()
        .enumerate()
        .filter(|(i, _)| set.contains_index(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Logits = std::array::from_fn(|i| if set.contains_index(i) { (f[i] - m).exp() } else { 0.0 });
    let z: f64 = e.iter().sum();
    std::array::from_fn(|i| e[i] / z)
}

/// Loss of one instance and its gradient with respect to the logits.
pub fn instance_loss(f: &Logits, set: CandidateLabelSet, mode: WeightGradient) -> (f64, Logits) {
    let lse = log_sum_exp(f);
    let g = softmax(f);
    let w = candidate_weights(f, set);
    // -log g_i = lse - f_i
    let loss: f64 = (0..N_BEHAVIORS)
        .filter(|&i| set.contains_index(i))
        .map(|i| w[i] * (lse - f[i]))
        .sum();
    let grad = match mode {
        WeightGradient::Frozen => std::array::from_fn(|k| g[k] - w[k]),
        WeightGradient::Full => {
            let mean_f: f64 = (0..N_BEHAVIORS).map(|i| w[i] * f[i]).sum();
            std::array::from_fn(|k| g[k] - w[k] * (1.0 + f[k] - mean_f))
        }
    };
    (loss, grad)
}

/// Logits for a batch together with the candidate sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PllBatch {
    pub logits: Vec<Logits>,
    pub label_sets: Vec<CandidateLabelSet>,
}

impl PllBatch {
    pub fn new(logits: Vec<Logits>, label_sets: Vec<CandidateLabelSet>) -> Result<Self> {
        if logits.len() != label_sets.len() {
            return Err(Error::invalid(format!(
                "{} logit rows but {} label sets",
                logits.len(),
                label_sets.len()
            )));
        }
        if logits.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        Ok(Self { logits, label_sets })
    }

    /// Parse from a flat row-major `[B x 4]` slice and label masks.
    pub fn from_masks(flat: &[f64], masks: &[u8]) -> Result<Self> {
        if flat.len() != masks.len() * N_BEHAVIORS {
            return Err(Error::invalid("logits must be B x 4"));
        }
        let sets = masks
            .iter()
            .map(|&m| CandidateLabelSet::from_mask(m))
            .collect::<Result<Vec<_>>>()?;
        let logits = flat
            .chunks_exact(N_BEHAVIORS)
            .map(|c| std::array::from_fn(|i| c[i]))
            .collect();
        Self::new(logits, sets)
    }
}

/// Mean partial-label loss over the batch and its gradient per logit row.
pub fn pll_loss_with_grad(batch: &PllBatch, mode: WeightGradient) -> (f64, Vec<Logits>) {
    let n = batch.logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.logits.len());
    for (f, s) in batch.logits.iter().zip(&batch.label_sets) {
        let (l, g) = instance_loss(f, *s, mode);
        total += l;
        grads.push(g.map(|v| v / n));
    }
    (total / n, grads)
}

pub fn pll_loss(batch: &PllBatch) -> f64 {
    pll_loss_with_grad(batch, WeightGradient::Frozen).0
}
