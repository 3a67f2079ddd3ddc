//! Identity-balanced P x K batch construction.
//!
//! A batch draws P distinct identities and K rows for each, so every
//! anchor sees K-1 in-batch positives and (P-1)*K negatives. The AGW
//! recipe uses P = 16, K = 4 for a batch of 64. Identities with fewer
//! than K rows are completed by sampling their rows with replacement.
//! All randomness comes from ChaCha8 seeded explicitly, so batches are
//! reproducible across runs and platforms.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index sets of one identity-balanced batch, grouped by identity:
/// `indices[g * k_instances ..][..k_instances]` all share one person id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    pub p_identities: usize,
    pub k_instances: usize,
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Uniform choice of `take` items from `0..len` without replacement
/// via a partial Fisher-Yates pass.
fn choose_indices(rng: &mut ChaCha8Rng, len: usize, take: usize) -> Vec<usize> {
    debug_assert!(take <= len);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..take {
        let j = i + rng.random_range(0..len - i);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Sample one P x K batch over rows labelled by `person_ids`.
///
/// Requires at least two identities (otherwise no anchor can have a
/// negative) and at least `p` distinct identities in the table.
/// Deterministic for a fixed seed.
pub fn sample_batch(person_ids: &[u32], p: usize, k: usize, seed: u64) -> Result<BatchSpec> {
    if p < 2 {
        return Err(Error::NotEnoughIdentities(format!(
            "need at least 2 identities per batch for in-batch negatives, requested {p}"
        )));
    }
    if k < 1 {
        return Err(Error::BadParams("k must be >= 1".into()));
    }
    // BTreeMap keeps identity order canonical regardless of row order.
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (row, &pid) in person_ids.iter().enumerate() {
        by_id.entry(pid).or_default().push(row);
    }
    if by_id.len() < p {
        return Err(Error::NotEnoughIdentities(format!(
            "{} distinct identities available, {p} requested",
            by_id.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let chosen = choose_indices(&mut rng, ids.len(), p);

    let mut indices = Vec::with_capacity(p * k);
    for id_idx in chosen {
        let rows = ids[id_idx];
        if rows.len() >= k {
            for offset in choose_indices(&mut rng, rows.len(), k) {
                indices.push(rows[offset]);
            }
        } else {
            // under-populated identity: draw with replacement
            for _ in 0..k {
                indices.push(rows[rng.random_range(0..rows.len())]);
            }
        }
    }

    Ok(BatchSpec {
        p_identities: p,
        k_instances: k,
        indices,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels(groups: &[(u32, usize)]) -> Vec<u32> {
        let mut out = Vec::new();
        for &(id, count) in groups {
            out.extend(std::iter::repeat(id).take(count));
        }
        out
    }

    #[test]
    fn sixteen_by_four_builds_batch_of_64() {
        let table = labels(&(0..20).map(|id| (id, 6)).collect::<Vec<_>>());
        let batch = sample_batch(&table, 16, 4, 7).unwrap();
        assert_eq!(batch.indices.len(), 64);

        // exactly 16 identities with exactly 4 rows each
        let mut per_id: BTreeMap<u32, usize> = BTreeMap::new();
        for &row in &batch.indices {
            *per_id.entry(table[row]).or_default() += 1;
        }
        assert_eq!(per_id.len(), 16);
        assert!(per_id.values().all(|&c| c == 4));

        // grouped layout: each K-chunk is one identity
        for chunk in batch.indices.chunks(4) {
            let ids: BTreeSet<u32> = chunk.iter().map(|&r| table[r]).collect();
            assert_eq!(ids.len(), 1);
        }
    }

    #[test]
    fn single_identity_request_is_rejected() {
        let table = labels(&[(0, 8), (1, 8)]);
        assert!(matches!(
            sample_batch(&table, 1, 4, 0),
            Err(Error::NotEnoughIdentities(_))
        ));
    }

    #[test]
    fn too_few_identities_rejected() {
        let table = labels(&[(0, 8), (1, 8)]);
        assert!(matches!(
            sample_batch(&table, 3, 4, 0),
            Err(Error::NotEnoughIdentities(_))
        ));
    }

    #[test]
    fn underpopulated_identity_repeats_only_its_own_rows() {
        // id 1 has rows 4 and 5 only
        let table = labels(&[(0, 4), (1, 2), (2, 4)]);
        for seed in 0..50 {
            let batch = sample_batch(&table, 3, 4, seed).unwrap();
            for chunk in batch.indices.chunks(4) {
                if table[chunk[0]] == 1 {
                    assert!(chunk.iter().all(|&r| r == 4 || r == 5), "{chunk:?}");
                    let distinct: BTreeSet<usize> = chunk.iter().copied().collect();
                    assert!(distinct.len() <= 2);
                }
            }
        }
    }

    #[test]
    fn without_replacement_rows_are_distinct() {
        let table = labels(&[(0, 5), (1, 5), (2, 5)]);
        let batch = sample_batch(&table, 2, 4, 11).unwrap();
        for chunk in batch.indices.chunks(4) {
            let distinct: BTreeSet<usize> = chunk.iter().copied().collect();
            assert_eq!(distinct.len(), 4);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let table = labels(&(0..10).map(|id| (id, 4)).collect::<Vec<_>>());
        let a = sample_batch(&table, 4, 4, 99).unwrap();
        let b = sample_batch(&table, 4, 4, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(&table, 4, 4, 100).unwrap();
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn identity_frequency_is_uniform_within_three_sigma() {
        // 10^4 batches choosing 4 of 10 identities: each identity is a
        // Binomial(10^4, 0.4) count. Seeds are fixed, so this is a
        // deterministic regression, not a flaky statistical test.
        let table = labels(&(0..10).map(|id| (id, 4)).collect::<Vec<_>>());
        let batches = 10_000u64;
        let mut counts = [0usize; 10];
        for seed in 0..batches {
            let batch = sample_batch(&table, 4, 4, seed).unwrap();
            let ids: BTreeSet<u32> = batch.indices.iter().map(|&r| table[r]).collect();
            for id in ids {
                counts[id as usize] += 1;
            }
        }
        let expected = batches as f64 * 0.4;
        let sigma = (batches as f64 * 0.4 * 0.6).sqrt();
        for (id, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() <= 3.0 * sigma,
                "identity {id}: {count} outside {expected} +- {}",
                3.0 * sigma
            );
        }
    }
}
