//! Property tests for the numerical kernels, the planner and the cost model.

use layer_reuse::attn::{
    full_attention, softmax, sparse_attention, topk_indices, LayerKvCache, TopKSet,
};
use layer_reuse::cost::{cost_model, covered_tokens, CostParams};
use layer_reuse::policy::{brute_force_policy, dp_optimize, validate_policy, LayerPolicy};
use layer_reuse::profile::{overlap_ratio, rnmse, SimilarityMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar-loop attention with an unshifted softmax, evaluated on the gathered rows.
fn oracle_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let d = q.len() as f64;
    let mut logits = Vec::new();
    for k in keys {
        let mut s = 0.0;
        for i in 0..q.len() {
            s += q[i] * k[i];
        }
        logits.push(s / d.sqrt());
    }
    let mut z = 0.0;
    for l in &logits {
        z += l.exp();
    }
    let mut out = vec![0.0; q.len()];
    for (n, l) in logits.iter().enumerate() {
        for i in 0..q.len() {
            out[i] += l.exp() / z * values[n][i];
        }
    }
    out
}

fn matrix_strategy(max_layers: usize, grid: Option<u32>) -> impl Strategy<Value = SimilarityMatrix> {
    (2..=max_layers).prop_flat_map(move |l| {
        let n = l * (l + 1) / 2;
        prop::collection::vec(0.0f64..=1.0, n).prop_map(move |raw| {
            let mut it = raw.into_iter();
            SimilarityMatrix::from_fn(l, |_, _| {
                let x = it.next().unwrap();
                match grid {
                    Some(g) => (x * g as f64).round() / g as f64,
                    None => x,
                }
            })
            .unwrap()
        })
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-50.0f64..50.0, 1..200),
        shift in -100.0f64..100.0,
    ) {
        let w = softmax(&logits);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        for (a, b) in w.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_follows_permutations(
        logits in prop::collection::vec(-10.0f64..10.0, 1..100),
        budget in 1usize..40,
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..logits.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // permuted[p] = logits[perm[p]]
        let permuted: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
        let a = topk_indices(&logits, budget).unwrap();
        let b = topk_indices(&permuted, budget).unwrap();
        prop_assert_eq!(a.len(), budget.min(logits.len()));
        let mut mapped: Vec<usize> = b.indices().iter().map(|&p| perm[p]).collect();
        mapped.sort_unstable();
        // Sets agree up to ties at the cut-off score.
        let mut sa: Vec<f64> = a.indices().iter().map(|&i| logits[i]).collect();
        let mut sb: Vec<f64> = mapped.iter().map(|&i| logits[i]).collect();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        prop_assert_eq!(sa, sb);
        let min_in = a.indices().iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for (i, &x) in logits.iter().enumerate() {
            if !a.contains(i) {
                prop_assert!(x <= min_in);
            }
        }
    }

    #[test]
    fn topk_ties_prefer_low_indices(n in 1usize..60, budget in 1usize..60) {
        let sel = topk_indices(&vec![0.5; n], budget).unwrap();
        prop_assert_eq!(sel.indices(), &(0..budget.min(n)).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(
        n in 2usize..80,
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            topk_indices(&scores, k).unwrap()
        };
        let (a, b) = (draw(), draw());
        let ab = overlap_ratio(&a, &b, k).unwrap();
        prop_assert_eq!(ab, overlap_ratio(&b, &a, k).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(overlap_ratio(&a, &a, k).unwrap(), 1.0);
    }

    #[test]
    fn dp_matches_brute_force(m in matrix_strategy(8, None), theta_step in 0u32..=10) {
        let theta = theta_step as f64 / 10.0;
        let dp = dp_optimize(&m, theta).unwrap();
        let bf = brute_force_policy(&m, theta).unwrap();
        prop_assert_eq!(dp.full_count, bf.full_count);
        prop_assert!((dp.cum_similarity - bf.cum_similarity).abs() <= 1e-12);
        prop_assert_eq!(&dp.policy.actions, &bf.policy.actions);
        prop_assert_eq!(&dp.policy.sources, &bf.policy.sources);
        prop_assert!(validate_policy(&dp.policy, &m, theta).is_empty());
    }

    #[test]
    fn dp_matches_brute_force_with_ties(m in matrix_strategy(8, Some(4)), theta_step in 0u32..=4) {
        let theta = theta_step as f64 / 4.0;
        let dp = dp_optimize(&m, theta).unwrap();
        let bf = brute_force_policy(&m, theta).unwrap();
        prop_assert_eq!(dp.full_count, bf.full_count);
        prop_assert!((dp.cum_similarity - bf.cum_similarity).abs() <= 1e-12);
        prop_assert_eq!(&dp.policy.sources, &bf.policy.sources);
    }

    #[test]
    fn full_count_is_monotone_in_theta(m in matrix_strategy(10, None)) {
        let mut prev = 0;
        for step in 0..=10 {
            let c = dp_optimize(&m, step as f64 / 10.0).unwrap().full_count;
            prop_assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn bytes_ratio_closed_form(
        layers in 1usize..64,
        full_frac in 0.0f64..=1.0,
        n in 1u64..200_000,
        budget in 1u64..10_000,
        block_size in 1u64..256,
        width in 1u64..512,
    ) {
        let full = 1 + ((layers - 1) as f64 * full_frac) as usize;
        let mut sources: Vec<usize> = (0..layers).collect();
        for s in sources.iter_mut().skip(full) {
            *s = full - 1;
        }
        let policy = LayerPolicy::from_chain_sources(&sources, None);
        prop_assert_eq!(policy.full_count(), full);
        let p = CostParams {
            context_len: n,
            budget,
            block_size,
            bytes_per_elem: 2,
            kv_width: width,
            link_bandwidth: 1e9,
            hbm_bandwidth: 1e12,
        };
        let r = cost_model(&policy, &p).unwrap();
        let b = covered_tokens(n, budget, block_size) as f64;
        let (l, c, n) = (layers as f64, full as f64, n as f64);
        let expected = (c * n + (l - c) * b) / (l * n);
        prop_assert!((r.bytes_ratio - expected).abs() <= 1e-12);
        prop_assert!((r.predicted_speedup * r.bytes_ratio - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rnmse_is_scale_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50),
        scale in prop_oneof![0.001f64..0.1, 1.0f64..1000.0],
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(b.iter().any(|&x| x.abs() > 1e-3));
        let base = rnmse(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * scale).collect();
        let scaled = rnmse(&sa, &sb).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
    }
}

/// 1000 random draws: full-coverage subsets are bit-identical to full
/// attention and partial subsets match the scalar oracle on gathered rows.
#[test]
fn sparse_attention_agrees_with_full_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for draw in 0..1000 {
        let d = [4, 16, 64][draw % 3];
        let n = rng.random_range(1..=512);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let keys: Vec<Vec<f64>> = (0..n).map(|_| row(&mut rng)).collect();
        let values: Vec<Vec<f64>> = (0..n).map(|_| row(&mut rng)).collect();
        let q = row(&mut rng);
        let cache = LayerKvCache::from_rows(&keys, &values).unwrap();

        let all = TopKSet::new((0..n).collect(), n).unwrap();
        let (full, _) = full_attention(&q, cache.view()).unwrap();
        assert_eq!(sparse_attention(&q, cache.view(), &all).unwrap(), full);
        let oracle = oracle_attention(&q, &keys, &values);
        for (a, b) in full.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "draw {draw}");
        }

        let k = rng.random_range(1..=n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx.truncate(k);
        let sel = TopKSet::new(idx, k).unwrap();
        let got = sparse_attention(&q, cache.view(), &sel).unwrap();
        let gk: Vec<Vec<f64>> = sel.indices().iter().map(|&i| keys[i].clone()).collect();
        let gv: Vec<Vec<f64>> = sel.indices().iter().map(|&i| values[i].clone()).collect();
        for (a, b) in got.iter().zip(oracle_attention(&q, &gk, &gv)) {
            assert!((a - b).abs() < 1e-9, "draw {draw}");
        }
    }
}
