//! Deterministic synthetic multi-layer decoder.
//!
//! Layer 0 draws its keys (and each step's query) at random. Every deeper
//! layer mixes the previous layer's row with fresh noise,
//! `normalize(rho * prev + (1 - rho) * noise)`, so `rho` dials how much
//! adjacent layers agree on which tokens matter: `rho = 1` copies the
//! previous layer exactly, `rho = 0` makes layers independent. Key rows are
//! renormalized to norm `sqrt(d)`. Queries are mixed the same way and then
//! scaled by `query_gain`, so logits `q.k / sqrt(d)` of random rows have a
//! standard deviation close to the gain: at 1 attention is nearly uniform,
//! larger gains concentrate it on a few tokens.
//!
//! Queries drift across decode steps by a per-layer random walk, and each
//! decode step appends one token to every layer's cache: step `t` attends
//! over `context_len + t` tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attn::{
    aggregate_head_logits, block_aggregate_scores, full_attention, sparse_attention,
    topk_blocks, topk_indices, AttentionScores, BlockSet, KvView, LayerKvCache, TopKSet,
};
use crate::error::{Error, Result};

/// Step size of the per-layer query random walk, relative to a unit-RMS row.
pub const QUERY_DRIFT: f64 = 0.25;

const STEP_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthModelConfig {
    pub layers: usize,
    pub head_dim: usize,
    pub context_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Inter-layer correlation in `[0, 1]`.
    pub rho: f64,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Query norm relative to `sqrt(d)`; sets the logit spread.
    #[serde(default = "default_query_gain")]
    pub query_gain: f64,
}

fn default_heads() -> usize {
    1
}

pub const DEFAULT_QUERY_GAIN: f64 = 4.0;

fn default_query_gain() -> f64 {
    DEFAULT_QUERY_GAIN
}

impl Default for SynthModelConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            head_dim: 16,
            context_len: 512,
            seed: 0,
            rho: 0.9,
            heads: 1,
            query_gain: DEFAULT_QUERY_GAIN,
        }
    }
}

impl SynthModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho={} must lie in [0, 1]", self.rho)));
        }
        if self.layers < 2 {
            return Err(Error::Config(format!("layers={} must be at least 2", self.layers)));
        }
        if self.context_len < 2 {
            return Err(Error::Config(format!(
                "context length {} must be at least 2",
                self.context_len
            )));
        }
        if self.head_dim == 0 || self.heads == 0 {
            return Err(Error::Config("head dimension and head count must be positive".into()));
        }
        if !(self.query_gain.is_finite() && self.query_gain > 0.0) {
            return Err(Error::Config(format!("query gain {} must be positive", self.query_gain)));
        }
        Ok(())
    }

    /// Width of a layer's concatenated query/output vector.
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Initial caches of a generated model; the decode stream is derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    config: SynthModelConfig,
    /// `[layer][head]`, `context_len` rows each.
    caches: Vec<Vec<LayerKvCache>>,
}

fn gaussian_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        let scale = (row.len() as f64).sqrt() / norm;
        row.iter_mut().for_each(|x| *x *= scale);
    }
    row
}

fn mix(prev: &[f64], noise: Vec<f64>, rho: f64) -> Vec<f64> {
    if rho == 1.0 {
        return prev.to_vec();
    }
    let mixed = prev
        .iter()
        .zip(noise)
        .map(|(p, n)| rho * p + (1.0 - rho) * n)
        .collect();
    normalize(mixed)
}

/// Builds the layered caches for `cfg`. Bit-identical for identical configs.
pub fn generate_model(cfg: &SynthModelConfig) -> Result<SynthModel> {
    cfg.validate()?;
    let d = cfg.head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut caches: Vec<Vec<LayerKvCache>> = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let prev = layer.checked_sub(1).map(|l| &caches[l]);
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let mut keys = Vec::with_capacity(cfg.context_len * d);
            let mut values = Vec::with_capacity(cfg.context_len * d);
            for row in 0..cfg.context_len {
                let noise = gaussian_row(&mut rng, d);
                let key = match prev {
                    None => normalize(noise),
                    Some(p) => mix(p[head].key(row), noise, cfg.rho),
                };
                keys.extend(key);
                values.extend(gaussian_row(&mut rng, d));
            }
            heads.push(LayerKvCache::new(keys, values, d)?);
        }
        caches.push(heads);
    }
    Ok(SynthModel {
        config: cfg.clone(),
        caches,
    })
}

impl SynthModel {
    pub fn config(&self) -> &SynthModelConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn cache(&self, layer: usize, head: usize) -> &LayerKvCache {
        &self.caches[layer][head]
    }

    /// Input handed to layer `l + 1` given layer `l`'s query and attention
    /// output: a residual sum. Used by the sensitivity probe.
    pub fn next_layer_input(&self, query: &[f64], output: &[f64]) -> Vec<f64> {
        query.iter().zip(output).map(|(q, o)| q + o).collect()
    }

    /// Materializes `steps` decode steps: per-step queries and the grown
    /// caches. Prefix-stable: the first `t` steps do not depend on `steps`.
    pub fn unroll(&self, steps: usize) -> Result<DecodeStream> {
        let cfg = &self.config;
        let d = cfg.head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(STEP_STREAM);

        let mut walks: Vec<Vec<Vec<f64>>> = (0..cfg.layers)
            .map(|_| (0..cfg.heads).map(|_| normalize(gaussian_row(&mut rng, d))).collect())
            .collect();
        let mut caches = self.caches.clone();
        let mut queries = Vec::with_capacity(steps);

        for _ in 0..steps {
            let mut step_queries: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.layers);
            let mut step_keys: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.layers);
            for layer in 0..cfg.layers {
                let mut layer_queries = Vec::with_capacity(cfg.heads);
                let mut layer_keys = Vec::with_capacity(cfg.heads);
                for head in 0..cfg.heads {
                    let jitter = gaussian_row(&mut rng, d);
                    let walk: Vec<f64> = walks[layer][head]
                        .iter()
                        .zip(jitter)
                        .map(|(w, j)| w + QUERY_DRIFT * j)
                        .collect();
                    let walk = normalize(walk);
                    walks[layer][head] = walk.clone();
                    let query = if layer == 0 {
                        walk
                    } else {
                        let prev: &Vec<f64> = &step_queries[layer - 1][head];
                        mix(prev, walk, cfg.rho)
                    };
                    layer_queries.push(query);

                    let noise = gaussian_row(&mut rng, d);
                    let key = if layer == 0 {
                        normalize(noise)
                    } else {
                        mix(&step_keys[layer - 1][head], noise, cfg.rho)
                    };
                    let value = gaussian_row(&mut rng, d);
                    caches[layer][head].push(&key, &value)?;
                    layer_keys.push(key);
                }
                step_queries.push(layer_queries);
                step_keys.push(layer_keys);
            }
            // The layer chain mixes unit-scale queries; the gain applies on the way out.
            for q in step_queries.iter_mut().flatten().flatten() {
                *q *= cfg.query_gain;
            }
            queries.push(step_queries);
        }
        Ok(DecodeStream {
            config: cfg.clone(),
            caches,
            queries,
        })
    }
}

/// Queries and grown caches for a fixed number of decode steps.
#[derive(Debug, Clone)]
pub struct DecodeStream {
    config: SynthModelConfig,
    caches: Vec<Vec<LayerKvCache>>,
    /// `[step][layer][head]`.
    queries: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Full attention over every head of one layer at one step.
#[derive(Debug, Clone)]
pub struct FullLayer {
    /// Head outputs concatenated in head order.
    pub output: Vec<f64>,
    pub heads: Vec<AttentionScores>,
    /// Selection signal: per-head logits summed.
    pub selection_logits: Vec<f64>,
}

impl DecodeStream {
    pub fn config(&self) -> &SynthModelConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.queries.len()
    }

    /// Cache length visible at `step`.
    pub fn tokens_at(&self, step: usize) -> usize {
        self.config.context_len + step
    }

    pub fn query(&self, step: usize, layer: usize, head: usize) -> &[f64] {
        &self.queries[step][layer][head]
    }

    /// Concatenated per-head query of a layer.
    pub fn layer_query(&self, step: usize, layer: usize) -> Vec<f64> {
        self.queries[step][layer].concat()
    }

    pub fn cache_at(&self, step: usize, layer: usize, head: usize) -> Result<KvView<'_>> {
        self.caches[layer][head].prefix(self.tokens_at(step))
    }

    /// Final grown cache (context plus one row per unrolled step).
    pub fn grown_cache(&self, layer: usize, head: usize) -> &LayerKvCache {
        &self.caches[layer][head]
    }

    pub fn full_layer(&self, step: usize, layer: usize) -> Result<FullLayer> {
        let mut output = Vec::with_capacity(self.config.model_dim());
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let (out, scores) =
                full_attention(self.query(step, layer, head), self.cache_at(step, layer, head)?)?;
            output.extend(out);
            heads.push(scores);
        }
        let selection_logits = aggregate_head_logits(&heads)?;
        Ok(FullLayer {
            output,
            heads,
            selection_logits,
        })
    }

    /// Attention of every head restricted to `sel`, concatenated.
    pub fn sparse_layer(&self, step: usize, layer: usize, sel: &TopKSet) -> Result<Vec<f64>> {
        let mut output = Vec::with_capacity(self.config.model_dim());
        for head in 0..self.config.heads {
            output.extend(sparse_attention(
                self.query(step, layer, head),
                self.cache_at(step, layer, head)?,
                sel,
            )?);
        }
        Ok(output)
    }
}

/// One layer at one step of a full-attention run.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub query: Vec<f64>,
    pub output: Vec<f64>,
    pub topk: TopKSet,
    pub blocks: BlockSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub layers: Vec<LayerRecord>,
}

/// Full-attention decode record: per step, per layer, the query, the exact
/// output and the token/block top-k selections.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub config: SynthModelConfig,
    pub budget: usize,
    pub block_size: usize,
    /// Block budget used for the block-level sets: `ceil(budget / block_size)`.
    pub block_budget: usize,
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn record(&self, step: usize, layer: usize) -> &LayerRecord {
        &self.steps[step].layers[layer]
    }
}

/// Runs exact attention at every layer for `steps` steps, recording top-`budget`
/// token sets and top-`ceil(budget / block_size)` block sets.
pub fn run_full_trace(
    model: &SynthModel,
    steps: usize,
    budget: usize,
    block_size: usize,
) -> Result<DecodeTrace> {
    let stream = model.unroll(steps)?;
    run_full_trace_on(&stream, budget, block_size)
}

pub fn run_full_trace_on(stream: &DecodeStream, budget: usize, block_size: usize) -> Result<DecodeTrace> {
    let cfg = stream.config();
    if budget == 0 || budget > cfg.context_len {
        return Err(Error::Config(format!(
            "budget k={budget} must lie in [1, {}]",
            cfg.context_len
        )));
    }
    if block_size == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    let block_budget = budget.div_ceil(block_size);
    let mut out_steps = Vec::with_capacity(stream.steps());
    for step in 0..stream.steps() {
        let mut layers = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let full = stream.full_layer(step, layer)?;
            let topk = topk_indices(&full.selection_logits, budget)?;
            let block_scores = block_aggregate_scores(&full.selection_logits, block_size)?;
            let blocks = topk_blocks(&block_scores, block_budget, block_size)?;
            layers.push(LayerRecord {
                query: stream.layer_query(step, layer),
                output: full.output,
                topk,
                blocks,
            });
        }
        out_steps.push(TraceStep { layers });
    }
    Ok(DecodeTrace {
        config: cfg.clone(),
        budget,
        block_size,
        block_budget,
        steps: out_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rho: f64, seed: u64) -> SynthModelConfig {
        SynthModelConfig {
            layers: 4,
            head_dim: 8,
            context_len: 64,
            seed,
            rho,
            heads: 1,
            ..Default::default()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(cfg(1.5, 0).validate().is_err());
        assert!(cfg(-0.1, 0).validate().is_err());
        let mut c = cfg(0.5, 0);
        c.layers = 1;
        assert!(c.validate().is_err());
        c = cfg(0.5, 0);
        c.context_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_model(&cfg(0.7, 42)).unwrap();
        let b = generate_model(&cfg(0.7, 42)).unwrap();
        assert_eq!(a, b);
        let c = generate_model(&cfg(0.7, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perfect_correlation_copies_layers() {
        let m = generate_model(&cfg(1.0, 3)).unwrap();
        for l in 1..4 {
            assert_eq!(m.cache(l, 0).keys(), m.cache(0, 0).keys());
        }
        let s = m.unroll(3).unwrap();
        for t in 0..3 {
            for l in 1..4 {
                assert_eq!(s.query(t, l, 0), s.query(t, 0, 0));
            }
        }
    }

    #[test]
    fn rows_have_unit_rms() {
        let m = generate_model(&cfg(0.4, 1)).unwrap();
        let c = m.cache(2, 0);
        for r in 0..c.len() {
            let n2: f64 = c.key(r).iter().map(|x| x * x).sum();
            assert!((n2 - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unroll_is_prefix_stable_and_grows_caches() {
        let m = generate_model(&cfg(0.5, 9)).unwrap();
        let short = m.unroll(2).unwrap();
        let long = m.unroll(5).unwrap();
        assert_eq!(short.query(1, 3, 0), long.query(1, 3, 0));
        assert_eq!(long.grown_cache(0, 0).len(), 64 + 5);
        assert_eq!(long.cache_at(0, 0, 0).unwrap().len(), 64);
        assert_eq!(long.cache_at(4, 2, 0).unwrap().len(), 68);
    }

    #[test]
    fn trace_saturates_when_budget_equals_context() {
        let mut c = cfg(0.3, 5);
        c.layers = 2;
        let m = generate_model(&c).unwrap();
        let t = run_full_trace(&m, 1, 64, 16).unwrap();
        let all: Vec<usize> = (0..64).collect();
        assert_eq!(t.record(0, 0).topk.indices(), all.as_slice());
        assert_eq!(t.record(0, 1).topk.indices(), all.as_slice());
        assert_eq!(t.block_budget, 4);
        assert_eq!(t.record(0, 1).blocks.blocks(), &[0, 1, 2, 3]);
    }

    #[test]
    fn perfect_correlation_gives_identical_sets() {
        let m = generate_model(&cfg(1.0, 11)).unwrap();
        let t = run_full_trace(&m, 3, 10, 4).unwrap();
        for s in &t.steps {
            for l in 1..4 {
                assert_eq!(s.layers[l].topk, s.layers[0].topk);
                assert_eq!(s.layers[l].blocks, s.layers[0].blocks);
            }
        }
    }

    #[test]
    fn budget_above_context_is_rejected() {
        let m = generate_model(&cfg(0.3, 5)).unwrap();
        assert!(matches!(run_full_trace(&m, 1, 65, 4), Err(Error::Config(_))));
    }

    #[test]
    fn multi_head_outputs_concatenate() {
        let mut c = cfg(0.8, 2);
        c.heads = 3;
        let m = generate_model(&c).unwrap();
        let t = run_full_trace(&m, 2, 8, 4).unwrap();
        assert_eq!(t.record(1, 2).output.len(), 24);
        assert_eq!(t.record(1, 2).query.len(), 24);
        assert_eq!(t.record(1, 2).topk.len(), 8);
    }
}
