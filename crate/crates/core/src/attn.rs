//! Single-query attention over a per-layer KV cache.
//!
//! Everything here is a pure function over borrowed data: exact scaled
//! dot-product attention, top-k selection with lowest-index tie-breaking,
//! attention restricted to a gathered subset, and block-level pooling of
//! scores for coarse-grained selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keys and values for one attention head of one layer, both `N x d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
}

impl LayerKvCache {
    pub fn new(keys: Vec<f64>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("head dimension must be positive".into()));
        }
        if keys.len() != values.len() {
            return Err(Error::Config(format!(
                "keys ({}) and values ({}) differ in size",
                keys.len(),
                values.len()
            )));
        }
        if keys.is_empty() || !keys.len().is_multiple_of(dim) {
            return Err(Error::Config(format!(
                "cache of {} elements is not a non-empty multiple of d={dim}",
                keys.len()
            )));
        }
        if keys.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericInput("cache contains non-finite entries".into()));
        }
        Ok(Self { keys, values, dim })
    }

    pub fn from_rows(keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        let dim = keys.first().map(Vec::len).unwrap_or(0);
        if keys.iter().chain(values.iter()).any(|r| r.len() != dim) {
            return Err(Error::Config("ragged key/value rows".into()));
        }
        Self::new(keys.concat(), values.concat(), dim)
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn key(&self, row: usize) -> &[f64] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }

    pub fn value(&self, row: usize) -> &[f64] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Appends one token's key and value rows.
    pub fn push(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.dim || value.len() != self.dim {
            return Err(Error::Config(format!(
                "appended row width differs from d={}",
                self.dim
            )));
        }
        if key.iter().chain(value.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericInput("appended row is non-finite".into()));
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(())
    }

    pub fn view(&self) -> KvView<'_> {
        KvView {
            keys: &self.keys,
            values: &self.values,
            dim: self.dim,
        }
    }

    /// View of the first `rows` tokens, i.e. the cache as it stood at an
    /// earlier decode step.
    pub fn prefix(&self, rows: usize) -> Result<KvView<'_>> {
        if rows == 0 || rows > self.len() {
            return Err(Error::Config(format!(
                "prefix of {rows} rows requested from a cache of {}",
                self.len()
            )));
        }
        let end = rows * self.dim;
        Ok(KvView {
            keys: &self.keys[..end],
            values: &self.values[..end],
            dim: self.dim,
        })
    }
}

/// Borrowed, validated view over a [`LayerKvCache`] (or a prefix of one).
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a> {
    keys: &'a [f64],
    values: &'a [f64],
    dim: usize,
}

impl<'a> KvView<'a> {
    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn key(&self, row: usize) -> &'a [f64] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }

    pub fn value(&self, row: usize) -> &'a [f64] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }
}

/// Pre-softmax logits (already scaled by `1/sqrt(d)`) and the softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Selected token indices, stored in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopKSet {
    indices: Vec<usize>,
    budget: usize,
}

impl TopKSet {
    /// Builds a set from arbitrary distinct indices; the result is sorted.
    pub fn new(mut indices: Vec<usize>, budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidInput("top-k budget must be at least 1".into()));
        }
        if indices.len() > budget {
            return Err(Error::InvalidSelection(format!(
                "{} indices exceed the budget of {budget}",
                indices.len()
            )));
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSelection("duplicate index".into()));
        }
        Ok(Self { indices, budget })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Size of the intersection of two canonical (sorted) sets.
    pub fn intersection_len(&self, other: &TopKSet) -> usize {
        let (mut a, mut b, mut shared) = (0, 0, 0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    shared += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        shared
    }

    /// Union with extra indices (e.g. sink or recent tokens); the budget grows
    /// to fit the result.
    pub fn union_with(&self, extra: impl IntoIterator<Item = usize>) -> TopKSet {
        let mut indices = self.indices.clone();
        indices.extend(extra);
        indices.sort_unstable();
        indices.dedup();
        let budget = self.budget.max(indices.len());
        TopKSet { indices, budget }
    }
}

/// Selected block indices (ascending) at a fixed block size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSet {
    blocks: Vec<usize>,
    block_size: usize,
}

impl BlockSet {
    pub fn new(mut blocks: Vec<usize>, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidInput("block size must be at least 1".into()));
        }
        blocks.sort_unstable();
        if blocks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSelection("duplicate block index".into()));
        }
        Ok(Self { blocks, block_size })
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Token range `[start, end)` covered by `block` in a cache of `tokens` rows.
    pub fn block_range(&self, block: usize, tokens: usize) -> std::ops::Range<usize> {
        let start = (block * self.block_size).min(tokens);
        let end = ((block + 1) * self.block_size).min(tokens);
        start..end
    }

    /// Tokens covered by the selected blocks, in ascending order.
    pub fn covered_tokens(&self, tokens: usize) -> Result<TopKSet> {
        let block_count = tokens.div_ceil(self.block_size);
        if let Some(&b) = self.blocks.iter().find(|&&b| b >= block_count) {
            return Err(Error::InvalidSelection(format!(
                "block {b} out of range for {tokens} tokens at block size {}",
                self.block_size
            )));
        }
        let indices: Vec<usize> = self
            .blocks
            .iter()
            .flat_map(|&b| self.block_range(b, tokens))
            .collect();
        let budget = indices.len().max(1);
        TopKSet::new(indices, budget)
    }

    pub fn coverage_count(&self, tokens: usize) -> usize {
        self.blocks
            .iter()
            .map(|&b| self.block_range(b, tokens).len())
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_query(q: &[f64], cache: &KvView<'_>) -> Result<()> {
    if q.len() != cache.dim() {
        return Err(Error::Config(format!(
            "query has d={} but cache has d={}",
            q.len(),
            cache.dim()
        )));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericInput("query contains non-finite entries".into()));
    }
    Ok(())
}

/// Shared kernel for full and subset attention. Rows are visited in the
/// order given, so the full path and a full-coverage subset produce
/// identical arithmetic.
fn attend_rows(
    q: &[f64],
    cache: &KvView<'_>,
    rows: impl Iterator<Item = usize> + Clone,
) -> (Vec<f64>, AttentionScores) {
    let scale = (cache.dim() as f64).sqrt();
    let logits: Vec<f64> = rows.clone().map(|n| dot(q, cache.key(n)) / scale).collect();
    let weights = softmax(&logits);
    let mut output = vec![0.0; cache.dim()];
    for (w, n) in weights.iter().zip(rows) {
        for (o, v) in output.iter_mut().zip(cache.value(n)) {
            *o += w * v;
        }
    }
    (output, AttentionScores { logits, weights })
}

/// Exact attention of one query over the whole cache.
pub fn full_attention(q: &[f64], cache: KvView<'_>) -> Result<(Vec<f64>, AttentionScores)> {
    check_query(q, &cache)?;
    Ok(attend_rows(q, &cache, 0..cache.len()))
}

/// Attention restricted to `sel`, softmax renormalized over the subset.
pub fn sparse_attention(q: &[f64], cache: KvView<'_>, sel: &TopKSet) -> Result<Vec<f64>> {
    sparse_attention_scores(q, cache, sel).map(|(out, _)| out)
}

/// As [`sparse_attention`], also returning the subset-local scores.
pub fn sparse_attention_scores(
    q: &[f64],
    cache: KvView<'_>,
    sel: &TopKSet,
) -> Result<(Vec<f64>, AttentionScores)> {
    check_query(q, &cache)?;
    if sel.is_empty() {
        return Err(Error::InvalidSelection("empty selection".into()));
    }
    if let Some(&last) = sel.indices().last() {
        if last >= cache.len() {
            return Err(Error::InvalidSelection(format!(
                "index {last} out of range for a cache of {} tokens",
                cache.len()
            )));
        }
    }
    Ok(attend_rows(q, &cache, sel.indices().iter().copied()))
}

/// Indices of the `min(budget, len)` largest scores; ties go to the lower
/// index. Result is ascending.
fn top_indices(scores: &[f64], budget: usize) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::InvalidInput("top-k budget must be at least 1".into()));
    }
    if scores.iter().any(|x| x.is_nan()) {
        return Err(Error::NumericInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let take = budget.min(scores.len());
    let rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if take < order.len() && take > 0 {
        order.select_nth_unstable_by(take - 1, rank);
    }
    order.truncate(take);
    order.sort_unstable();
    Ok(order)
}

/// Token-level top-k over logits.
pub fn topk_indices(logits: &[f64], budget: usize) -> Result<TopKSet> {
    let indices = top_indices(logits, budget)?;
    TopKSet::new(indices, budget)
}

/// Max-pools logits into `ceil(N / block_size)` block scores.
pub fn block_aggregate_scores(logits: &[f64], block_size: usize) -> Result<Vec<f64>> {
    if block_size == 0 {
        return Err(Error::InvalidInput("block size must be at least 1".into()));
    }
    Ok(logits
        .chunks(block_size)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Block-level top-k with the same contract as [`topk_indices`].
pub fn topk_blocks(block_scores: &[f64], budget: usize, block_size: usize) -> Result<BlockSet> {
    let blocks = top_indices(block_scores, budget)?;
    BlockSet::new(blocks, block_size)
}

/// Combines per-head scores into one selection signal by summing logits.
pub fn aggregate_head_logits(heads: &[AttentionScores]) -> Result<Vec<f64>> {
    let first = heads
        .first()
        .ok_or_else(|| Error::InvalidInput("no heads to aggregate".into()))?;
    let mut sum = first.logits.clone();
    for h in &heads[1..] {
        if h.logits.len() != sum.len() {
            return Err(Error::Config("heads disagree on cache length".into()));
        }
        for (s, x) in sum.iter_mut().zip(&h.logits) {
            *s += x;
        }
    }
    Ok(sum)
}
