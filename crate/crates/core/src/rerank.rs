//! k-reciprocal re-ranking over query and gallery context.
//!
//! The initial ranking is refined with gallery-to-gallery structure:
//! probes whose k-nearest-neighbor relation is mutual form reciprocal
//! sets, those sets are expanded through their members' half-size
//! reciprocal neighborhoods, soft-assigned with exp(-d) weights, and
//! smoothed by local query expansion over the k2 nearest probes. The
//! final distance blends the (per-row max-normalized) original
//! distance with the Jaccard distance between weight vectors:
//!
//! `final = lambda * original_norm + (1 - lambda) * jaccard`
//!
//! Neighborhoods are built on the concatenated query + gallery probe
//! set, so the query-query and gallery-gallery matrices are required
//! alongside query-gallery. Everything is deterministic: ranking ties
//! break on probe index and per-row work is order-independent.

use ndarray::Array2;
use rayon::prelude::*;

use crate::distances::DistanceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    /// Reciprocal neighborhood size.
    pub k1: usize,
    /// Local query expansion size.
    pub k2: usize,
    /// Weight of the original distance in the final blend.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn new(k1: usize, k2: usize, lambda: f64) -> Result<Self> {
        if k2 < 1 || k1 < k2 {
            return Err(Error::BadParams(format!(
                "need k1 >= k2 >= 1, got k1={k1}, k2={k2}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::BadParams(format!(
                "lambda must be in [0, 1], got {lambda}"
            )));
        }
        Ok(Self { k1, k2, lambda })
    }
}

/// Sparse weight row: (probe index, weight), sorted by index.
type SparseRow = Vec<(u32, f64)>;

/// First `take` probe indices of row `i` by ascending distance, ties
/// by ascending index. Partial selection keeps this o(A log A).
fn top_neighbors(row: &[f64], take: usize) -> Vec<u32> {
    let take = take.min(row.len());
    let mut order: Vec<u32> = (0..row.len() as u32).collect();
    let cmp =
        |&a: &u32, &b: &u32| row[a as usize].total_cmp(&row[b as usize]).then(a.cmp(&b));
    if take < order.len() {
        order.select_nth_unstable_by(take, cmp);
        order.truncate(take);
    }
    order.sort_unstable_by(cmp);
    order
}

fn reciprocal_set(probe: usize, k: usize, neighbors: &[Vec<u32>]) -> Vec<u32> {
    neighbors[probe][..k.min(neighbors[probe].len())]
        .iter()
        .copied()
        .filter(|&j| {
            neighbors[j as usize][..k.min(neighbors[j as usize].len())]
                .contains(&(probe as u32))
        })
        .collect()
}

/// Re-rank a query-gallery distance matrix.
///
/// `q_g` is Q x G, `g_g` is G x G, `q_q` is Q x Q; all three must use
/// consistent metrics over the same probe sets. With `lambda = 1` the
/// per-query ranking equals the original one exactly.
pub fn k_reciprocal_rerank(
    q_g: &DistanceMatrix,
    g_g: &DistanceMatrix,
    q_q: &DistanceMatrix,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    RerankParams::new(params.k1, params.k2, params.lambda)?;
    let (q, g) = q_g.values.dim();
    if q_q.values.dim() != (q, q) {
        return Err(Error::DimMismatch(format!(
            "q_q is {:?}, expected {q}x{q}",
            q_q.values.dim()
        )));
    }
    if g_g.values.dim() != (g, g) {
        return Err(Error::DimMismatch(format!(
            "g_g is {:?}, expected {g}x{g}",
            g_g.values.dim()
        )));
    }
    let total = q + g;

    // concatenated probe-set distances, row-normalized to [0, 1]
    let mut norm = Array2::<f64>::zeros((total, total));
    for i in 0..total {
        for j in 0..total {
            norm[[i, j]] = match (i < q, j < q) {
                (true, true) => q_q.values[[i, j]],
                (true, false) => q_g.values[[i, j - q]],
                (false, true) => q_g.values[[j, i - q]],
                (false, false) => g_g.values[[i - q, j - q]],
            };
        }
    }
    for mut row in norm.rows_mut() {
        let max = row.iter().copied().fold(0.0_f64, f64::max);
        if max > 0.0 {
            row.mapv_inplace(|v| v / max);
        }
    }

    let k_forward = params.k1 + 1; // the probe itself ranks among its neighbors
    let k_half = ((params.k1 as f64 / 2.0).round() as usize) + 1;
    let prefix = k_forward.max(params.k2);
    let neighbors: Vec<Vec<u32>> = (0..total)
        .into_par_iter()
        .map(|i| top_neighbors(norm.row(i).as_slice().expect("row-major"), prefix))
        .collect();

    // soft assignment over expanded reciprocal neighborhoods
    let weights: Vec<SparseRow> = (0..total)
        .into_par_iter()
        .map(|i| {
            let base = reciprocal_set(i, k_forward, &neighbors);
            let mut expanded = base.clone();
            for &candidate in &base {
                let half = reciprocal_set(candidate as usize, k_half, &neighbors);
                let overlap = half.iter().filter(|j| base.contains(j)).count();
                if 3 * overlap > 2 * half.len() {
                    expanded.extend_from_slice(&half);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();

            let mut row: SparseRow = expanded
                .into_iter()
                .map(|j| (j, (-norm[[i, j as usize]]).exp()))
                .collect();
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in &mut row {
                *w /= sum;
            }
            row
        })
        .collect();

    // local query expansion: average the weight rows of the k2 nearest
    let weights: Vec<SparseRow> = if params.k2 > 1 {
        (0..total)
            .into_par_iter()
            .map(|i| {
                let near = &neighbors[i][..params.k2.min(neighbors[i].len())];
                let inv = 1.0 / near.len() as f64;
                let mut merged: std::collections::BTreeMap<u32, f64> = Default::default();
                for &p in near {
                    for &(j, w) in &weights[p as usize] {
                        *merged.entry(j).or_insert(0.0) += w * inv;
                    }
                }
                merged.into_iter().collect()
            })
            .collect()
    } else {
        weights
    };

    // inverted index: which probes give weight to column j
    let mut inverted: Vec<Vec<u32>> = vec![Vec::new(); total];
    for (p, row) in weights.iter().enumerate() {
        for &(j, _) in row {
            inverted[j as usize].push(p as u32);
        }
    }

    // Jaccard distance between each query row and each gallery probe;
    // rows sum to 1, so sum(max) = 2 - sum(min).
    let lambda = params.lambda;
    let mut values = Array2::<f64>::zeros((q, g));
    values
        .axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out)| {
            let mut min_sum = vec![0.0_f64; total];
            for &(col, w_query) in &weights[i] {
                for &p in &inverted[col as usize] {
                    let row = &weights[p as usize];
                    let w_probe = row
                        .binary_search_by_key(&col, |&(j, _)| j)
                        .map(|idx| row[idx].1)
                        .expect("inverted index entry");
                    min_sum[p as usize] += w_query.min(w_probe);
                }
            }
            for (offset, v) in out.iter_mut().enumerate() {
                let t = min_sum[q + offset];
                let jaccard = 1.0 - t / (2.0 - t);
                *v = lambda * norm[[i, q + offset]] + (1.0 - lambda) * jaccard;
            }
        });

    DistanceMatrix::new(
        values,
        q_g.metric,
        q_g.query_meta.clone(),
        q_g.gallery_meta.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distances::{pairwise_distance, Metric};
    use crate::embedio::EmbeddingSet;
    use crate::metrics::rank_gallery;
    use crate::synth::{generate, SynthConfig};

    fn split_query_gallery(set: &EmbeddingSet) -> (EmbeddingSet, EmbeddingSet) {
        let query_rows: Vec<usize> = (0..set.len()).filter(|&r| set.cam_ids()[r] == 0).collect();
        let gallery_rows: Vec<usize> =
            (0..set.len()).filter(|&r| set.cam_ids()[r] != 0).collect();
        (
            set.subset(&query_rows, "query").unwrap(),
            set.subset(&gallery_rows, "gallery").unwrap(),
        )
    }

    fn rerank_synthetic(seed: u64, lambda: f64) -> (DistanceMatrix, DistanceMatrix) {
        let set = generate(&SynthConfig {
            n_ids: 8,
            per_id_per_cam: 3,
            n_cams: 3,
            dim: 8,
            noise_sigma: 0.45,
            cam_offset_sigma: 0.1,
            seed,
            ..Default::default()
        })
        .unwrap();
        let (query, gallery) = split_query_gallery(&set);
        let q_g = pairwise_distance(&query, &gallery, Metric::Euclidean).unwrap();
        let g_g = pairwise_distance(&gallery, &gallery, Metric::Euclidean).unwrap();
        let q_q = pairwise_distance(&query, &query, Metric::Euclidean).unwrap();
        let params = RerankParams {
            lambda,
            ..Default::default()
        };
        let reranked = k_reciprocal_rerank(&q_g, &g_g, &q_q, &params).unwrap();
        (q_g, reranked)
    }

    #[test]
    fn lambda_one_preserves_ranking_exactly() {
        let (original, reranked) = rerank_synthetic(3, 1.0);
        let all = vec![true; original.n_gallery()];
        for i in 0..original.n_queries() {
            let before = rank_gallery(original.values.row(i).as_slice().unwrap(), &all);
            let after = rank_gallery(reranked.values.row(i).as_slice().unwrap(), &all);
            assert_eq!(before, after, "query {i}");
        }
    }

    #[test]
    fn output_is_finite() {
        let (_, reranked) = rerank_synthetic(5, 0.3);
        assert!(reranked.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_across_runs() {
        let (_, a) = rerank_synthetic(7, 0.3);
        let (_, b) = rerank_synthetic(7, 0.3);
        assert_eq!(
            a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_params_and_shapes() {
        let (q_g, _) = rerank_synthetic(1, 0.3);
        let bad = RerankParams {
            k1: 2,
            k2: 6,
            lambda: 0.3,
        };
        assert!(matches!(
            k_reciprocal_rerank(&q_g, &q_g, &q_g, &bad),
            Err(Error::BadParams(_))
        ));
        let good = RerankParams::default();
        assert!(matches!(
            k_reciprocal_rerank(&q_g, &q_g, &q_g, &good),
            Err(Error::DimMismatch(_))
        ));
    }
}
