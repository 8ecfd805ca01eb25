//! Offline layer policy planning.
//!
//! A policy is a path through the lower-triangular similarity matrix. State
//! `(i, j)` means layer `j` uses the top-k indices produced by layer `i`;
//! `(j, j)` means layer `j` runs full attention. From `(i, j)` a path either
//! moves vertically to `(i, j + 1)` (reuse, allowed iff `M[i][j+1] >= theta`)
//! or jumps to `(j + 1, j + 1)` (full attention). Among valid paths we want
//! the fewest full-attention layers and, among those, the largest cumulative
//! similarity.
//!
//! [`dp_optimize`] solves this keeping one dominant state per cell;
//! [`brute_force_policy`] enumerates every path and serves as its oracle.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::profile::SimilarityMatrix;

/// Largest layer count [`brute_force_policy`] will enumerate (`2^(L-1)` paths).
pub const BRUTE_FORCE_MAX_LAYERS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerAction {
    Full,
    Reuse,
}

/// Per-layer actions plus, for reuse layers, the full layer whose indices
/// they consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPolicy {
    pub actions: Vec<LayerAction>,
    /// `None` for full layers.
    pub sources: Vec<Option<usize>>,
    /// Threshold the policy was planned at; `None` for static policies.
    pub theta: Option<f64>,
    /// Content hash of the similarity matrix the policy was planned from.
    pub matrix_hash: Option<String>,
}

impl LayerPolicy {
    /// Builds a policy from each layer's index source (`sources[j] == j` marks
    /// a full layer).
    pub fn from_chain_sources(chain: &[usize], theta: Option<f64>) -> Self {
        let actions = chain
            .iter()
            .enumerate()
            .map(|(j, &s)| if s == j { LayerAction::Full } else { LayerAction::Reuse })
            .collect();
        let sources = chain
            .iter()
            .enumerate()
            .map(|(j, &s)| (s != j).then_some(s))
            .collect();
        Self {
            actions,
            sources,
            theta,
            matrix_hash: None,
        }
    }

    pub fn all_full(layers: usize) -> Self {
        Self::from_chain_sources(&(0..layers).collect::<Vec<_>>(), None)
    }

    pub fn layers(&self) -> usize {
        self.actions.len()
    }

    pub fn full_count(&self) -> usize {
        self.actions.iter().filter(|a| **a == LayerAction::Full).count()
    }

    pub fn full_layers(&self) -> Vec<usize> {
        (0..self.layers())
            .filter(|&j| self.actions[j] == LayerAction::Full)
            .collect()
    }

    pub fn is_all_full(&self) -> bool {
        self.full_count() == self.layers()
    }

    /// Cumulative similarity of the policy's path on `m`.
    pub fn cum_similarity(&self, m: &SimilarityMatrix) -> Result<f64> {
        if m.layers() != self.layers() {
            return Err(Error::Config("policy and matrix disagree on layer count".into()));
        }
        let mut s = 0.0;
        for j in 0..self.layers() {
            s += match (self.actions[j], self.sources[j]) {
                (LayerAction::Full, _) => 1.0,
                (LayerAction::Reuse, Some(i)) if i < j => m.get(i, j),
                _ => return Err(Error::InvalidInput(format!("layer {j} has no valid source"))),
            };
        }
        Ok(s)
    }
}

/// Policy together with its objective values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPolicy {
    pub policy: LayerPolicy,
    pub full_count: usize,
    pub cum_similarity: f64,
}

/// Best path reaching a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpCell {
    pub full_count: usize,
    pub cum_similarity: f64,
    /// Predecessor state `(source, layer)`.
    pub back: Option<(usize, usize)>,
}

impl DpCell {
    /// Fewer full layers first, then larger cumulative similarity.
    fn rank(&self, other: &DpCell) -> Ordering {
        self.full_count
            .cmp(&other.full_count)
            .then(other.cum_similarity.total_cmp(&self.cum_similarity))
    }
}

/// `table[j][i]` is the dominant state at `(i, j)`, `None` if unreachable.
pub type DpTable = Vec<Vec<Option<DpCell>>>;

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidInput(format!("theta={theta} must lie in [0, 1]")));
    }
    Ok(())
}

/// Fills the DP table layer by layer. Within a diagonal cell, ties between
/// predecessors go to the smaller source index.
pub fn dp_table(m: &SimilarityMatrix, theta: f64) -> Result<DpTable> {
    check_theta(theta)?;
    let layers = m.layers();
    let mut table: DpTable = (0..layers).map(|j| vec![None; j + 1]).collect();
    table[0][0] = Some(DpCell {
        full_count: 1,
        cum_similarity: 1.0,
        back: None,
    });
    for j in 0..layers.saturating_sub(1) {
        for i in 0..=j {
            let Some(cell) = table[j][i] else { continue };
            let reuse = m.get(i, j + 1);
            if reuse >= theta {
                // (i, j + 1) has (i, j) as its only predecessor.
                table[j + 1][i] = Some(DpCell {
                    full_count: cell.full_count,
                    cum_similarity: cell.cum_similarity + reuse,
                    back: Some((i, j)),
                });
            }
            let candidate = DpCell {
                full_count: cell.full_count + 1,
                cum_similarity: cell.cum_similarity + 1.0,
                back: Some((i, j)),
            };
            let slot = &mut table[j + 1][j + 1];
            if slot.is_none_or(|best| candidate.rank(&best) == Ordering::Less) {
                *slot = Some(candidate);
            }
        }
    }
    Ok(table)
}

/// Optimal layer policy for `m` at threshold `theta`.
pub fn dp_optimize(m: &SimilarityMatrix, theta: f64) -> Result<PlannedPolicy> {
    let table = dp_table(m, theta)?;
    let last = m.layers() - 1;
    let mut best: Option<(usize, DpCell)> = None;
    for (i, cell) in table[last].iter().enumerate() {
        let Some(cell) = cell else { continue };
        if best.is_none_or(|(_, b)| cell.rank(&b) == Ordering::Less) {
            best = Some((i, *cell));
        }
    }
    let (source, cell) =
        best.ok_or_else(|| Error::Invariant("no reachable state at the last layer".into()))?;

    let mut chain = vec![0; m.layers()];
    let mut state = Some((source, last));
    while let Some((i, j)) = state {
        chain[j] = i;
        state = table[j][i].and_then(|c| c.back);
    }
    let mut policy = LayerPolicy::from_chain_sources(&chain, Some(theta));
    policy.matrix_hash = Some(m.content_hash());
    Ok(PlannedPolicy {
        policy,
        full_count: cell.full_count,
        cum_similarity: cell.cum_similarity,
    })
}

/// Exhaustive search over all `2^(L-1)` reset/continue choices.
///
/// Ties in `(C, S)` are broken by comparing the per-layer source vectors from
/// the last layer backwards, smaller first; this reproduces the choices
/// [`dp_optimize`] makes (smallest final source, then smallest predecessor
/// source at every reset).
pub fn brute_force_policy(m: &SimilarityMatrix, theta: f64) -> Result<PlannedPolicy> {
    check_theta(theta)?;
    let layers = m.layers();
    if layers > BRUTE_FORCE_MAX_LAYERS {
        return Err(Error::EnumerationLimit {
            layers,
            limit: BRUTE_FORCE_MAX_LAYERS,
        });
    }
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    'paths: for mask in 0u32..(1u32 << (layers - 1)) {
        let mut chain = vec![0usize; layers];
        let (mut count, mut sim) = (1usize, 1.0f64);
        for j in 1..layers {
            if mask & (1 << (j - 1)) != 0 {
                chain[j] = j;
                count += 1;
                sim += 1.0;
            } else {
                let src = chain[j - 1];
                let reuse = m.get(src, j);
                if reuse < theta {
                    continue 'paths;
                }
                chain[j] = src;
                sim += reuse;
            }
        }
        let better = match &best {
            None => true,
            Some((bc, bs, bchain)) => count
                .cmp(bc)
                .then(bs.total_cmp(&sim))
                .then_with(|| chain.iter().rev().cmp(bchain.iter().rev()))
                == Ordering::Less,
        };
        if better {
            best = Some((count, sim, chain));
        }
    }
    let (full_count, cum_similarity, chain) =
        best.ok_or_else(|| Error::Invariant("the all-full path is always valid".into()))?;
    let mut policy = LayerPolicy::from_chain_sources(&chain, Some(theta));
    policy.matrix_hash = Some(m.content_hash());
    Ok(PlannedPolicy {
        policy,
        full_count,
        cum_similarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    /// Policy length differs from the matrix.
    LayerCount,
    FirstLayerFull,
    /// Reuse layer without a source.
    MissingSource,
    /// Full layer that also names a source.
    SpuriousSource,
    /// Source is not an earlier layer.
    SourceNotEarlier,
    SourceNotFull,
    /// A layer between the source and the reuse layer is not part of the same chain.
    BrokenChain,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyViolation {
    pub layer: usize,
    pub constraint: Constraint,
}

/// Checks every structural and threshold invariant; an empty list means valid.
pub fn validate_policy(policy: &LayerPolicy, m: &SimilarityMatrix, theta: f64) -> Vec<PolicyViolation> {
    let mut out = Vec::new();
    let mut flag = |layer, constraint| out.push(PolicyViolation { layer, constraint });
    let layers = policy.layers();
    if layers != m.layers() || policy.sources.len() != layers || layers == 0 {
        flag(0, Constraint::LayerCount);
        return out;
    }
    if policy.actions[0] != LayerAction::Full {
        flag(0, Constraint::FirstLayerFull);
    }
    for j in 0..layers {
        match (policy.actions[j], policy.sources[j]) {
            (LayerAction::Full, Some(_)) => flag(j, Constraint::SpuriousSource),
            (LayerAction::Full, None) => {}
            (LayerAction::Reuse, None) => flag(j, Constraint::MissingSource),
            (LayerAction::Reuse, Some(i)) if i >= j => flag(j, Constraint::SourceNotEarlier),
            (LayerAction::Reuse, Some(i)) => {
                if policy.actions[i] != LayerAction::Full {
                    flag(j, Constraint::SourceNotFull);
                }
                let chained = (i + 1..j).all(|mid| {
                    policy.actions[mid] == LayerAction::Reuse && policy.sources[mid] == Some(i)
                });
                if !chained {
                    flag(j, Constraint::BrokenChain);
                }
                if m.get(i, j) < theta {
                    flag(j, Constraint::Threshold);
                }
            }
        }
    }
    out
}

/// Full attention at layers `0, step, 2*step, ...`; every other layer reuses
/// the most recent full layer.
pub fn static_jump_policy(layers: usize, step: usize) -> Result<LayerPolicy> {
    if step == 0 {
        return Err(Error::InvalidInput("jump step must be at least 1".into()));
    }
    if layers == 0 {
        return Err(Error::InvalidInput("policy needs at least one layer".into()));
    }
    let chain: Vec<usize> = (0..layers).map(|j| j - j % step).collect();
    Ok(LayerPolicy::from_chain_sources(&chain, None))
}
