//! Average oracle log-likelihood of the MoG benchmarks under their true parameters.

use dac_core::datagen::{oracle_ll, DataKind, Generator, Truth};

const DATASETS: u64 = 1000;
const TOLERANCE: f64 = 0.03;

fn benchmark_average(n_max: usize, k_max: usize, seed: u64) -> f64 {
    let g = Generator::new(DataKind::Mog, n_max, k_max).unwrap();
    let total: f64 = (0..DATASETS)
        .map(|s| {
            let d = g.dataset(seed, s);
            let Truth::Mog(t) = &d.truth else { unreachable!() };
            oracle_ll(&d.points, t)
        })
        .sum();
    total / DATASETS as f64
}

#[test]
fn small_benchmark_oracle_matches_reported_value() {
    let ll = benchmark_average(1000, 4, 0);
    assert!((ll - -0.693).abs() < TOLERANCE, "oracle LL {ll}");
}

#[test]
fn large_benchmark_oracle_matches_reported_value() {
    let ll = benchmark_average(3000, 12, 0);
    assert!((ll - -1.527).abs() < TOLERANCE, "oracle LL {ll}");
}
