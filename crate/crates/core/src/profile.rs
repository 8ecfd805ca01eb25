//! Offline profiling: inter-layer top-k overlap and per-layer sensitivity.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn::{sparse_attention_scores, topk_indices, TopKSet};
use crate::error::{Error, Result};
use crate::synth::{DecodeTrace, SynthModel};

/// Floor applied to tokens outside a sparse selection before comparing
/// distributions.
pub const KL_FLOOR: f64 = 1e-12;

/// `|a ∩ b| / k`.
pub fn overlap_ratio(a: &TopKSet, b: &TopKSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("overlap budget k must be positive".into()));
    }
    if a.len() != k || b.len() != k {
        return Err(Error::InvalidInput(format!(
            "overlap needs two sets of size k={k}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.intersection_len(b) as f64 / k as f64)
}

/// Lower-triangular table of overlap ratios. `get(source, target)` is defined
/// for `source <= target`; the diagonal is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    layers: usize,
    /// Row-major over targets: row `j` holds sources `0..=j`.
    entries: Vec<f64>,
}

fn packed_index(source: usize, target: usize) -> usize {
    target * (target + 1) / 2 + source
}

impl SimilarityMatrix {
    /// Builds from a row-major packed lower triangle of length `L(L+1)/2`.
    pub fn from_packed(layers: usize, entries: Vec<f64>) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidInput("similarity matrix needs at least one layer".into()));
        }
        let expected = layers * (layers + 1) / 2;
        if entries.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{} entries for L={layers}, expected {expected}",
                entries.len()
            )));
        }
        if let Some(x) = entries.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidInput(format!("entry {x} outside [0, 1]")));
        }
        if let Some(j) = (0..layers).find(|&j| entries[packed_index(j, j)] != 1.0) {
            return Err(Error::InvalidInput(format!("diagonal entry at layer {j} is not 1")));
        }
        Ok(Self { layers, entries })
    }

    /// Fills off-diagonal entries from `f(source, target)`; the diagonal is forced to 1.
    pub fn from_fn(layers: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut entries = Vec::with_capacity(layers * (layers + 1) / 2);
        for target in 0..layers {
            for source in 0..=target {
                entries.push(if source == target { 1.0 } else { f(source, target) });
            }
        }
        Self::from_packed(layers, entries)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Overlap between `source` and a later-or-equal `target` layer.
    ///
    /// Panics if `source > target` or either index is out of range.
    pub fn get(&self, source: usize, target: usize) -> f64 {
        assert!(source <= target && target < self.layers, "({source}, {target}) outside the lower triangle");
        self.entries[packed_index(source, target)]
    }

    pub fn packed(&self) -> &[f64] {
        &self.entries
    }

    /// Mean of `M[j - lag][j]` over valid `j`; `None` when `lag >= L` or `lag == 0`.
    pub fn mean_lag(&self, lag: usize) -> Option<f64> {
        if lag == 0 || lag >= self.layers {
            return None;
        }
        let vals: Vec<f64> = (lag..self.layers).map(|j| self.get(j - lag, j)).collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over all strictly-lower entries.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 1..self.layers {
            for i in 0..j {
                sum += self.get(i, j);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Content hash binding downstream artifacts (policies) to this matrix.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.layers as u64).to_le_bytes());
        for x in &self.entries {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `M[i][j]` = mean over steps of the overlap between the top-k sets of
/// layers `i` and `j`. Steps are folded in order so the result is bit-stable.
pub fn build_similarity_matrix(trace: &DecodeTrace) -> Result<SimilarityMatrix> {
    if trace.steps.is_empty() {
        return Err(Error::InvalidInput("trace has no decode steps".into()));
    }
    let layers = trace.layers();
    if let Some(s) = trace.steps.iter().position(|s| s.layers.len() != layers) {
        return Err(Error::InvalidInput(format!("step {s} does not cover all {layers} layers")));
    }
    let k = trace.budget;
    let steps = trace.steps.len() as f64;
    let mut sums = vec![0.0; layers * (layers + 1) / 2];
    for step in &trace.steps {
        for target in 1..layers {
            for source in 0..target {
                sums[packed_index(source, target)] +=
                    overlap_ratio(&step.layers[source].topk, &step.layers[target].topk, k)?;
            }
        }
    }
    SimilarityMatrix::from_fn(layers, |source, target| sums[packed_index(source, target)] / steps)
}

/// Entry-wise mean of several matrices over the same layer count.
pub fn merge_matrices(matrices: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to merge".into()))?;
    if matrices.iter().any(|m| m.layers != first.layers) {
        return Err(Error::InvalidInput("matrices disagree on layer count".into()));
    }
    let n = matrices.len() as f64;
    SimilarityMatrix::from_fn(first.layers, |i, j| {
        matrices.iter().map(|m| m.get(i, j)).sum::<f64>() / n
    })
}

/// Relative L2 error `‖approx − reference‖ / ‖reference‖`.
///
/// Returns `Some(0.0)` when both the reference and the error are zero, and
/// `None` (undefined) when only the reference is zero.
pub fn rnmse(approx: &[f64], reference: &[f64]) -> Option<f64> {
    let err = approx
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    let norm = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (err == 0.0).then_some(0.0);
    }
    Some(err / norm)
}

/// `KL(full ‖ sparse)` where the sparse distribution over `sel` is extended to
/// all tokens with [`KL_FLOOR`] on unselected tokens and renormalized.
pub fn extended_kl(full_weights: &[f64], sel: &TopKSet, sparse_weights: &[f64]) -> Result<f64> {
    if sel.len() != sparse_weights.len() {
        return Err(Error::InvalidInput("sparse weights do not match the selection".into()));
    }
    if sel.indices().last().is_some_and(|&i| i >= full_weights.len()) {
        return Err(Error::InvalidSelection("selection exceeds the distribution".into()));
    }
    let mut q = vec![KL_FLOOR; full_weights.len()];
    for (&i, &w) in sel.indices().iter().zip(sparse_weights) {
        q[i] = w;
    }
    // Sparse weights already sum to one when nothing was floored.
    let z: f64 = if sel.len() < full_weights.len() { q.iter().sum() } else { 1.0 };
    Ok(full_weights
        .iter()
        .zip(&q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, qi)| p * (p / (qi / z)).ln())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: usize,
    /// `None` when the full-attention reference input is the zero vector.
    pub rnmse: Option<f64>,
    /// Nats, averaged over heads.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub step: usize,
    pub budget: usize,
    pub layers: Vec<LayerSensitivity>,
}

/// Sparsifies one layer at a time (top-`budget` of its own scores) and
/// measures the deviation of the next layer's input against full attention.
///
/// Layer inputs of the synthetic model do not depend on upstream outputs, so
/// running the preceding layers at full attention leaves layer `l` unchanged
/// and is not repeated here.
pub fn sensitivity_profile(model: &SynthModel, step: usize, budget: usize) -> Result<SensitivityReport> {
    if budget == 0 {
        return Err(Error::InvalidInput("budget must be at least 1".into()));
    }
    let stream = model.unroll(step + 1)?;
    let heads = model.config().heads;
    let mut layers = Vec::with_capacity(model.layers());
    for layer in 0..model.layers() {
        let full = stream.full_layer(step, layer)?;
        let sel = topk_indices(&full.selection_logits, budget)?;
        let mut sparse_out = Vec::with_capacity(full.output.len());
        let mut kl = 0.0;
        for head in 0..heads {
            let (out, scores) = sparse_attention_scores(
                stream.query(step, layer, head),
                stream.cache_at(step, layer, head)?,
                &sel,
            )?;
            sparse_out.extend(out);
            kl += extended_kl(&full.heads[head].weights, &sel, &scores.weights)?;
        }
        let query = stream.layer_query(step, layer);
        let x_full = model.next_layer_input(&query, &full.output);
        let x_sparse = model.next_layer_input(&query, &sparse_out);
        layers.push(LayerSensitivity {
            layer,
            rnmse: rnmse(&x_sparse, &x_full),
            kl: kl / heads as f64,
        });
    }
    Ok(SensitivityReport { step, budget, layers })
}
