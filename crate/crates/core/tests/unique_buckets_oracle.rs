mod support;

use consent_core::registrar::{longest_unique_buckets, longest_unique_buckets_counted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::first_occurrence_oracle;

#[test]
fn matches_brute_force_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..=100);
        let range = rng.random_range(1..=16u16);
        let buckets: Vec<u16> = (0..n).map(|_| rng.random_range(0..range)).collect();
        let speakers: Vec<u32> = (0..n as u32).map(|s| 40 + s).collect();
        let (got, ops) = longest_unique_buckets_counted(&buckets, &speakers);
        assert_eq!(got, first_occurrence_oracle(&buckets, &speakers));
        assert!(ops <= n, "{ops} steps for {n} elements");
        let (b, _) = &got;
        let mut sorted = b.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), b.len());
    }
}

#[test]
fn step_count_is_linear_up_to_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [10usize, 1_000, 100_000] {
        let buckets: Vec<u16> = (0..n).map(|_| rng.random_range(0..16)).collect();
        let speakers: Vec<u32> = (0..n as u32).collect();
        let (_, ops) = longest_unique_buckets_counted(&buckets, &speakers);
        assert!(ops <= n);
    }
    assert_eq!(longest_unique_buckets(&[], &[]), (vec![], vec![]));
}
