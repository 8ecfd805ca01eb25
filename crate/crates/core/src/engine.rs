//! Hybrid decoding under a layer policy.
//!
//! Full layers run exact attention and extract fresh top-k indices from their
//! scores. Reuse layers take the indices of the layer directly before them and
//! attend only over the gathered rows; they never score the whole cache.
//! Because reuse layers pass their inherited indices on unchanged, every layer
//! of a chain consumes the indices produced by the chain's opening full layer.

use serde::{Deserialize, Serialize};

use crate::attn::{block_aggregate_scores, topk_blocks, topk_indices, BlockSet, TopKSet};
use crate::error::{Error, Result};
use crate::policy::{LayerAction, LayerPolicy};
use crate::profile::rnmse;
use crate::synth::{DecodeStream, DecodeTrace, SynthModel};

/// Selection granularity for full layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Granularity {
    /// Top-`budget` tokens (clamped to the current cache length).
    Token { budget: usize },
    /// Top-`budget` blocks of `block_size` consecutive tokens.
    Block { budget: usize, block_size: usize },
}

/// Non-default extensions to reuse layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseExtras {
    /// Always gather the first `sinks` tokens.
    pub sinks: usize,
    /// Always gather the newest `recent` tokens.
    pub recent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepCounters {
    pub tokens: usize,
    /// Layers whose scores were computed against the whole cache.
    pub full_score_computations: usize,
    /// Full-cache score computations issued while executing a reuse layer.
    pub reuse_full_scans: usize,
    pub reuse_layers: usize,
    /// KV rows read per layer (whole cache for full layers).
    pub gathered_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
enum Carried {
    Tokens(TopKSet),
    Blocks(BlockSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRunResult {
    pub granularity: Granularity,
    pub extras: ReuseExtras,
    /// `[step][layer]` concatenated head outputs.
    pub outputs: Vec<Vec<Vec<f64>>>,
    /// `[step][layer]` token indices produced (full) or consumed (reuse).
    pub selections: Vec<Vec<TopKSet>>,
    pub counters: Vec<StepCounters>,
    pub full_layer_count: usize,
    pub reuse_layer_count: usize,
}

impl DecodeRunResult {
    pub fn steps(&self) -> usize {
        self.outputs.len()
    }
}

fn check_policy(policy: &LayerPolicy, layers: usize) -> Result<()> {
    if policy.layers() != layers {
        return Err(Error::Config(format!(
            "policy covers {} layers but the model has {layers}",
            policy.layers()
        )));
    }
    if policy.actions.first() != Some(&LayerAction::Full) {
        return Err(Error::Config("policy must run full attention at layer 0".into()));
    }
    Ok(())
}

/// Token-level hybrid decode.
pub fn hybrid_decode(
    model: &SynthModel,
    policy: &LayerPolicy,
    budget: usize,
    steps: usize,
) -> Result<DecodeRunResult> {
    let stream = model.unroll(steps)?;
    hybrid_decode_on(&stream, policy, Granularity::Token { budget }, ReuseExtras::default())
}

/// Block-level hybrid decode: full layers pick top blocks by max-pooled
/// scores, reuse layers inherit the block set.
pub fn hybrid_decode_blocks(
    model: &SynthModel,
    policy: &LayerPolicy,
    block_budget: usize,
    block_size: usize,
    steps: usize,
) -> Result<DecodeRunResult> {
    let stream = model.unroll(steps)?;
    hybrid_decode_on(
        &stream,
        policy,
        Granularity::Block {
            budget: block_budget,
            block_size,
        },
        ReuseExtras::default(),
    )
}

pub fn hybrid_decode_on(
    stream: &DecodeStream,
    policy: &LayerPolicy,
    granularity: Granularity,
    extras: ReuseExtras,
) -> Result<DecodeRunResult> {
    let layers = stream.config().layers;
    check_policy(policy, layers)?;
    match granularity {
        Granularity::Token { budget } | Granularity::Block { budget, .. } if budget == 0 => {
            return Err(Error::Config("selection budget must be at least 1".into()));
        }
        Granularity::Block { block_size: 0, .. } => {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        _ => {}
    }

    let mut outputs = Vec::with_capacity(stream.steps());
    let mut selections = Vec::with_capacity(stream.steps());
    let mut counters = Vec::with_capacity(stream.steps());
    for step in 0..stream.steps() {
        let tokens = stream.tokens_at(step);
        let mut step_out = Vec::with_capacity(layers);
        let mut step_sel = Vec::with_capacity(layers);
        let mut c = StepCounters {
            tokens,
            full_score_computations: 0,
            reuse_full_scans: 0,
            reuse_layers: 0,
            gathered_rows: Vec::with_capacity(layers),
        };
        let mut carried: Option<Carried> = None;
        for layer in 0..layers {
            match policy.actions[layer] {
                LayerAction::Full => {
                    let full = stream.full_layer(step, layer)?;
                    c.full_score_computations += 1;
                    let (next, sel) = match granularity {
                        Granularity::Token { budget } => {
                            let sel = topk_indices(&full.selection_logits, budget)?;
                            (Carried::Tokens(sel.clone()), sel)
                        }
                        Granularity::Block { budget, block_size } => {
                            let scores = block_aggregate_scores(&full.selection_logits, block_size)?;
                            let blocks = topk_blocks(&scores, budget, block_size)?;
                            let sel = blocks.covered_tokens(tokens)?;
                            (Carried::Blocks(blocks), sel)
                        }
                    };
                    carried = Some(next);
                    c.gathered_rows.push(tokens);
                    step_sel.push(sel);
                    step_out.push(full.output);
                }
                LayerAction::Reuse => {
                    let inherited = carried
                        .as_ref()
                        .ok_or_else(|| Error::Invariant(format!("reuse at layer {layer} has nothing to inherit")))?;
                    let sel = match inherited {
                        Carried::Tokens(s) => s.clone(),
                        Carried::Blocks(b) => b.covered_tokens(tokens)?,
                    };
                    let gathered = if extras == ReuseExtras::default() {
                        sel.clone()
                    } else {
                        let recent_from = tokens.saturating_sub(extras.recent);
                        sel.union_with((0..extras.sinks.min(tokens)).chain(recent_from..tokens))
                    };
                    c.reuse_layers += 1;
                    c.gathered_rows.push(gathered.len());
                    step_out.push(stream.sparse_layer(step, layer, &gathered)?);
                    step_sel.push(sel);
                }
            }
        }
        outputs.push(step_out);
        selections.push(step_sel);
        counters.push(c);
    }
    Ok(DecodeRunResult {
        granularity,
        extras,
        outputs,
        selections,
        counters,
        full_layer_count: policy.full_count(),
        reuse_layer_count: layers - policy.full_count(),
    })
}

/// Hybrid-vs-baseline deviation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FidelityReport {
    /// `[step][layer]` relative L2 error of the attention output.
    pub rnmse: Vec<Vec<f64>>,
    pub layer_mean_rnmse: Vec<f64>,
    pub mean_rnmse: f64,
    /// `[step][layer]` share of the baseline's top-k that the hybrid run used.
    pub selection_overlap: Vec<Vec<f64>>,
    pub layer_mean_overlap: Vec<f64>,
}

pub fn fidelity_report(baseline: &DecodeTrace, run: &DecodeRunResult) -> Result<FidelityReport> {
    let steps = baseline.step_count();
    let layers = baseline.layers();
    if run.steps() != steps || run.outputs.iter().any(|s| s.len() != layers) {
        return Err(Error::InvalidInput(format!(
            "run shape does not match baseline ({steps} steps x {layers} layers)"
        )));
    }
    let mut rn = Vec::with_capacity(steps);
    let mut ov = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rn_row = Vec::with_capacity(layers);
        let mut ov_row = Vec::with_capacity(layers);
        for layer in 0..layers {
            let base = baseline.record(step, layer);
            let out = &run.outputs[step][layer];
            if out.len() != base.output.len() {
                return Err(Error::InvalidInput(format!(
                    "output width mismatch at step {step}, layer {layer}"
                )));
            }
            let e = rnmse(out, &base.output).ok_or_else(|| {
                Error::InvalidInput(format!("zero baseline output at step {step}, layer {layer}"))
            })?;
            rn_row.push(e);
            let sel = &run.selections[step][layer];
            ov_row.push(sel.intersection_len(&base.topk) as f64 / base.topk.len() as f64);
        }
        rn.push(rn_row);
        ov.push(ov_row);
    }
    let column_mean = |t: &Vec<Vec<f64>>, l: usize| t.iter().map(|r| r[l]).sum::<f64>() / steps as f64;
    let layer_mean_rnmse: Vec<f64> = (0..layers).map(|l| column_mean(&rn, l)).collect();
    let layer_mean_overlap = (0..layers).map(|l| column_mean(&ov, l)).collect();
    let mean_rnmse = if steps == 0 {
        0.0
    } else {
        layer_mean_rnmse.iter().sum::<f64>() / layers as f64
    };
    Ok(FidelityReport {
        rnmse: rn,
        layer_mean_rnmse,
        mean_rnmse,
        selection_overlap: ov,
        layer_mean_overlap,
    })
}
