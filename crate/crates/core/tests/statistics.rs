//! Seeded statistical checks on the synthetic generator.

use layer_reuse::profile::build_similarity_matrix;
use layer_reuse::synth::{generate_model, run_full_trace, SynthModelConfig};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adjacent_overlap(rho: f64, seed: u64) -> f64 {
    let cfg = SynthModelConfig {
        layers: 8,
        head_dim: 16,
        context_len: 256,
        seed,
        rho,
        ..Default::default()
    };
    let trace = run_full_trace(&generate_model(&cfg).unwrap(), 2, 32, 16).unwrap();
    build_similarity_matrix(&trace).unwrap().mean_lag(1).unwrap()
}

/// Per seed, adjacent overlap should rise along the rho grid; at most one
/// inversion in total across all seeds.
#[test]
fn adjacent_overlap_is_monotone_in_rho() {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut inversions = 0;
    for seed in 0..20 {
        let row: Vec<f64> = grid.iter().map(|&r| adjacent_overlap(r, seed)).collect();
        inversions += row.windows(2).filter(|w| w[1] < w[0]).count();
        assert_eq!(row[4], 1.0);
    }
    assert!(inversions <= 1, "{inversions} inversions");
}

/// Two independent uniformly random k-subsets of N share k^2/N elements in
/// expectation (hypergeometric mean), i.e. an overlap ratio of k/N.
#[test]
fn independent_subset_overlap_matches_hypergeometric_mean() {
    let (n, k) = (256usize, 32usize);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 20_000;
    let mut total = 0.0;
    for _ in 0..trials {
        let a: std::collections::HashSet<usize> = sample(&mut rng, n, k).into_iter().collect();
        let shared = sample(&mut rng, n, k).into_iter().filter(|x| a.contains(x)).count();
        total += shared as f64 / k as f64;
    }
    let mean = total / trials as f64;
    // sd of one ratio is about 0.055, so the mean over 20k trials has sd ~4e-4.
    assert!((mean - k as f64 / n as f64).abs() < 0.002, "{mean}");
}
