//! Regression tests against the committed fixtures.
//!
//! Traces and policies were written by the CLI; the `golden_*` files come
//! from `tools/oracles.py`, which reads the trace JSON and sidecar directly.
//! Regenerate everything with `tools/make_fixtures.sh`.

use std::collections::HashSet;
use std::path::PathBuf;

use layer_reuse::artifact::{read_matrix, read_policy, read_trace};
use layer_reuse::engine::{fidelity_report, hybrid_decode_on, Granularity, ReuseExtras};
use layer_reuse::policy::{brute_force_policy, dp_optimize, LayerAction};
use layer_reuse::profile::{build_similarity_matrix, sensitivity_profile};
use layer_reuse::synth::{generate_model, run_full_trace, SynthModelConfig};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn json(name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(fixture(name)).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn l8_config() -> SynthModelConfig {
    SynthModelConfig {
        layers: 8,
        head_dim: 16,
        context_len: 256,
        seed: 11,
        rho: 0.9,
        ..Default::default()
    }
}

#[test]
fn fixture_trace_regenerates_bit_for_bit() {
    let loaded = read_trace(&fixture("trace_l8.json")).unwrap();
    let model = generate_model(&l8_config()).unwrap();
    let fresh = run_full_trace(&model, 4, 32, 128).unwrap();
    assert_eq!(loaded.trace, fresh);
    let stream = model.unroll(4).unwrap();
    let caches = loaded.caches.unwrap();
    for (l, heads) in caches.iter().enumerate() {
        assert_eq!(&heads[0], stream.grown_cache(l, 0));
    }
}

#[test]
fn adjacent_overlap_regression() {
    let trace = read_trace(&fixture("trace_l8.json")).unwrap().trace;
    let m = build_similarity_matrix(&trace).unwrap();
    assert_eq!(m.mean_lag(1), Some(0.8772321428571429));
}

#[test]
fn matrix_matches_out_of_band_intersection_oracle() {
    let trace = read_trace(&fixture("trace_l8.json")).unwrap().trace;
    let m = build_similarity_matrix(&trace).unwrap();
    let golden = json("golden_matrix_l8.json");
    let rows = golden["rows"].as_array().unwrap();
    assert_eq!(rows.len(), m.layers());
    for (j, row) in rows.iter().enumerate() {
        for (i, v) in floats(row).into_iter().enumerate() {
            assert!((m.get(i, j) - v).abs() < 1e-12, "M[{i}][{j}]");
        }
    }
}

/// Second intersection oracle, reading only the raw JSON.
#[test]
fn matrix_matches_raw_json_intersection() {
    let raw = json("trace_l8.json");
    let k = raw["budget"].as_u64().unwrap() as f64;
    let steps = raw["steps"].as_array().unwrap();
    let sets: Vec<Vec<HashSet<u64>>> = steps
        .iter()
        .map(|s| {
            s["layer"]
                .as_array()
                .unwrap()
                .iter()
                .map(|l| l["topk"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect())
                .collect()
        })
        .collect();
    let trace = read_trace(&fixture("trace_l8.json")).unwrap().trace;
    let m = build_similarity_matrix(&trace).unwrap();
    for j in 0..8 {
        for i in 0..j {
            let mean = sets.iter().map(|s| s[i].intersection(&s[j]).count() as f64 / k).sum::<f64>()
                / sets.len() as f64;
            assert!((m.get(i, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn sensitivity_regression() {
    let model = generate_model(&l8_config()).unwrap();
    let report = sensitivity_profile(&model, 0, 32).unwrap();
    let rnmse = [
        0.004074490149122583,
        0.0038503874658294846,
        0.0030952957110801367,
        0.0029039433692519016,
        0.0029326935304418637,
        0.003612176701135986,
        0.0025308941871897655,
        0.0016176157056397957,
    ];
    let kl = [
        0.7156016040098709,
        0.704064603601397,
        0.6427546529370795,
        0.5590188744776113,
        0.4066564644746802,
        0.46457818666676026,
        0.40728008335140636,
        0.22204448883811922,
    ];
    for (l, s) in report.layers.iter().enumerate() {
        assert!((s.rnmse.unwrap() - rnmse[l]).abs() < 1e-12, "rnmse layer {l}");
        assert!((s.kl - kl[l]).abs() < 1e-12, "kl layer {l}");
    }
}

#[test]
fn planned_policy_matches_exhaustive_oracle() {
    let m = read_matrix(&fixture("matrix_l10.json")).unwrap().matrix;
    let planned = dp_optimize(&m, 0.6).unwrap();
    let brute = brute_force_policy(&m, 0.6).unwrap();
    let golden = json("golden_brute_l10_theta06.json");
    assert_eq!(planned.full_count as u64, golden["fullCount"].as_u64().unwrap());
    assert!((planned.cum_similarity - golden["cumSimilarity"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(golden["optima"], 1);
    let actions: Vec<&str> = planned
        .policy
        .actions
        .iter()
        .map(|a| if *a == LayerAction::Full { "full" } else { "reuse" })
        .collect();
    let expected: Vec<&str> = golden["actions"].as_array().unwrap().iter().map(|a| a.as_str().unwrap()).collect();
    assert_eq!(actions, expected);
    assert_eq!(planned.policy, brute.policy);
    assert_eq!(read_policy(&fixture("policy_l10_theta06.json")).unwrap().policy, planned.policy);
}

fn replay_check(policy: &str, granularity: Granularity, golden: &str, frozen_mean: f64) {
    let trace = read_trace(&fixture("trace_l10.json")).unwrap().trace;
    let policy = read_policy(&fixture(policy)).unwrap().policy;
    let stream = generate_model(&trace.config).unwrap().unroll(trace.step_count()).unwrap();
    let run = hybrid_decode_on(&stream, &policy, granularity, ReuseExtras::default()).unwrap();
    let f = fidelity_report(&trace, &run).unwrap();
    let g = json(golden);
    for (l, v) in floats(&g["layerMeanRnmse"]).into_iter().enumerate() {
        assert!((f.layer_mean_rnmse[l] - v).abs() < 1e-9, "layer {l}: {} vs {v}", f.layer_mean_rnmse[l]);
    }
    assert!((f.mean_rnmse - g["meanRnmse"].as_f64().unwrap()).abs() < 1e-9);
    assert!((f.mean_rnmse - frozen_mean).abs() < 1e-12, "{}", f.mean_rnmse);
}

#[test]
fn hybrid_decode_matches_naive_replay_theta_06() {
    replay_check(
        "policy_l10_theta06.json",
        Granularity::Token { budget: 64 },
        "golden_replay_l10_token.json",
        0.09596512406953203,
    );
}

#[test]
fn hybrid_decode_matches_naive_replay_jump3() {
    replay_check(
        "policy_l10_jump3.json",
        Granularity::Token { budget: 64 },
        "golden_replay_l10_jump3.json",
        0.02965151963710085,
    );
}

#[test]
fn block_128_matches_naive_replay() {
    replay_check(
        "policy_l10_jump3.json",
        Granularity::Block {
            budget: 1,
            block_size: 128,
        },
        "golden_replay_l10_block128.json",
        0.8462114702818615,
    );
}
