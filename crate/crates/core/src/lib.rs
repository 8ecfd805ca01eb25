//! Cross-layer reuse of top-k attention selections for long-context decode.
//!
//! A synthetic multi-layer attention model ([`synth`]) produces decode traces.
//! [`profile`] measures how much consecutive layers agree on their top-k
//! tokens, [`policy`] plans which layers compute fresh scores and which
//! inherit an earlier layer's selection, [`engine`] runs that plan, and
//! [`cost`] estimates the bytes it saves.

pub mod artifact;
pub mod attn;
pub mod cost;
pub mod engine;
pub mod error;
pub mod policy;
pub mod profile;
pub mod synth;

pub use attn::{BlockSet, KvView, LayerKvCache, TopKSet};
pub use cost::{cost_model, CostModelReport, CostParams, Precision};
pub use engine::{
    fidelity_report, hybrid_decode, hybrid_decode_blocks, hybrid_decode_on, DecodeRunResult,
    FidelityReport, Granularity, ReuseExtras, StepCounters,
};
pub use error::{Error, Result};
pub use policy::{
    brute_force_policy, dp_optimize, static_jump_policy, validate_policy, LayerAction,
    LayerPolicy, PlannedPolicy,
};
pub use profile::{build_similarity_matrix, sensitivity_profile, SimilarityMatrix};
pub use synth::{generate_model, run_full_trace, DecodeStream, DecodeTrace, SynthModel, SynthModelConfig};
