//! Bandwidth-bound cost model for one decode step.
//!
//! Decode attention is dominated by reading the KV cache. A full layer reads
//! all `N` rows; a reuse layer reads only the rows covered by its inherited
//! selection. When the cache lives in host memory, the same working set is
//! what has to cross the host link, since a reuse layer's indices are known
//! before it executes and can be prefetched. Score FLOPs are not modeled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::LayerPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostParams {
    /// Cache length `N`.
    pub context_len: u64,
    /// Token budget per reuse layer.
    pub budget: u64,
    /// 1 for token-level selection.
    pub block_size: u64,
    pub bytes_per_elem: u64,
    /// Width of one key (or value) row, all heads included.
    pub kv_width: u64,
    /// Host link bandwidth, bytes/s.
    pub link_bandwidth: f64,
    /// Device memory bandwidth, bytes/s.
    pub hbm_bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostModelReport {
    pub layers: u64,
    pub full_layers: u64,
    /// Tokens covered by the budget, `B'`.
    pub covered_tokens: u64,
    pub kv_bytes_full: u64,
    pub kv_bytes_hybrid: u64,
    pub bytes_ratio: f64,
    pub link_bytes_full: u64,
    pub link_bytes_offload: u64,
    pub hbm_seconds_full: f64,
    pub hbm_seconds_hybrid: f64,
    pub link_seconds_full: f64,
    pub link_seconds_offload: f64,
    pub predicted_speedup: f64,
}

/// Tokens a budget covers: the budget rounded up to whole blocks, capped at `N`.
pub fn covered_tokens(context_len: u64, budget: u64, block_size: u64) -> u64 {
    (budget.div_ceil(block_size) * block_size).min(context_len)
}

pub fn cost_model(policy: &LayerPolicy, p: &CostParams) -> Result<CostModelReport> {
    let positive_ints = [p.context_len, p.budget, p.block_size, p.bytes_per_elem, p.kv_width];
    if positive_ints.contains(&0) || policy.layers() == 0 {
        return Err(Error::InvalidInput("cost model inputs must be positive".into()));
    }
    if !(p.link_bandwidth > 0.0 && p.hbm_bandwidth > 0.0) {
        return Err(Error::InvalidInput("bandwidths must be positive".into()));
    }
    let layers = policy.layers() as u64;
    let full = policy.full_count() as u64;
    let covered = covered_tokens(p.context_len, p.budget, p.block_size);
    let row_bytes = 2 * p.kv_width * p.bytes_per_elem;
    let kv_bytes_full = layers * p.context_len * row_bytes;
    let kv_bytes_hybrid = (full * p.context_len + (layers - full) * covered) * row_bytes;
    // Offloaded: full layers pull the whole cache over the link, reuse layers
    // prefetch only their covered rows.
    let link_bytes_full = kv_bytes_full;
    let link_bytes_offload = kv_bytes_hybrid;
    Ok(CostModelReport {
        layers,
        full_layers: full,
        covered_tokens: covered,
        kv_bytes_full,
        kv_bytes_hybrid,
        bytes_ratio: kv_bytes_hybrid as f64 / kv_bytes_full as f64,
        link_bytes_full,
        link_bytes_offload,
        hbm_seconds_full: kv_bytes_full as f64 / p.hbm_bandwidth,
        hbm_seconds_hybrid: kv_bytes_hybrid as f64 / p.hbm_bandwidth,
        link_seconds_full: link_bytes_full as f64 / p.link_bandwidth,
        link_seconds_offload: link_bytes_offload as f64 / p.link_bandwidth,
        predicted_speedup: kv_bytes_full as f64 / kv_bytes_hybrid as f64,
    })
}
