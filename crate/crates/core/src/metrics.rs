//! CMC, AP/mAP and NP/INP/mINP retrieval evaluation.
//!
//! Per query, gallery entries are filtered by the protocol, ranked by
//! ascending distance (ties broken by gallery index), and scored:
//!
//! * AP   = (1/|G|) * sum over matches of k / r_k, where r_k is the
//!   1-based rank of the k-th correct match
//! * INP  = |G| / R_hard, where R_hard is the rank of the last correct
//!   match; the negative penalty NP = (R_hard - |G|) / R_hard = 1 - INP
//! * CMC-k = fraction of evaluated queries whose first correct match
//!   appears within the top k ranks
//!
//! Queries with no valid match after filtering are skipped and excluded
//! from every average. Per-query work is parallelized; results are
//! aggregated in query order so reports are identical for any thread
//! count.

use rayon::prelude::*;
use serde::Serialize;

use crate::distances::DistanceMatrix;
use crate::error::{Error, Result};
use crate::report::{opt_f64_17sig, vec_f64_17sig};

/// Gallery filtering applied before ranking each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterProtocol {
    /// Drop gallery entries sharing both person id and camera id with
    /// the query (standard cross-camera evaluation convention).
    #[default]
    CrossCamera,
    /// Keep every gallery entry.
    None,
}

impl FilterProtocol {
    pub fn token(self) -> &'static str {
        match self {
            FilterProtocol::CrossCamera => "cross_camera",
            FilterProtocol::None => "none",
        }
    }
}

/// Evaluation outcome for a single query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEval {
    pub query_index: usize,
    pub num_valid_matches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_match_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hardest_match_rank: Option<usize>,
    #[serde(serialize_with = "opt_f64_17sig", skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(serialize_with = "opt_f64_17sig", skip_serializing_if = "Option::is_none")]
    pub inp: Option<f64>,
    pub skipped: bool,
}

/// Aggregated CMC curve, mAP, mINP and per-query diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    #[serde(serialize_with = "vec_f64_17sig")]
    pub cmc: Vec<f64>,
    #[serde(serialize_with = "crate::report::f64_17sig")]
    pub map: f64,
    #[serde(serialize_with = "crate::report::f64_17sig")]
    pub minp: f64,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryEval>>,
}

impl EvalReport {
    /// CMC at rank `k` (1-based); clamps past the end of the curve.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        let idx = k.min(self.cmc.len()) - 1;
        self.cmc[idx]
    }
}

/// Indices of valid gallery entries by ascending distance, ties broken
/// by ascending gallery index.
pub fn rank_gallery(dist_row: &[f64], valid_mask: &[bool]) -> Vec<usize> {
    debug_assert_eq!(dist_row.len(), valid_mask.len());
    let mut order: Vec<usize> = (0..dist_row.len()).filter(|&j| valid_mask[j]).collect();
    order.sort_unstable_by(|&a, &b| dist_row[a].total_cmp(&dist_row[b]).then(a.cmp(&b)));
    order
}

/// Score one ranked list against its match mask.
///
/// `ranked` must contain only valid gallery indices. A query with zero
/// matches is returned as skipped.
pub fn query_eval(query_index: usize, ranked: &[usize], match_mask: &[bool]) -> QueryEval {
    let mut ap_sum = 0.0;
    let mut matches_seen = 0usize;
    let mut first_rank = None;
    let mut last_rank = None;
    for (pos, &g) in ranked.iter().enumerate() {
        if match_mask[g] {
            let rank = pos + 1;
            matches_seen += 1;
            if first_rank.is_none() {
                first_rank = Some(rank);
            }
            last_rank = Some(rank);
            ap_sum += matches_seen as f64 / rank as f64;
        }
    }
    if matches_seen == 0 {
        return QueryEval {
            query_index,
            num_valid_matches: 0,
            first_match_rank: None,
            hardest_match_rank: None,
            ap: None,
            inp: None,
            skipped: true,
        };
    }
    let hardest = last_rank.expect("matches_seen > 0");
    QueryEval {
        query_index,
        num_valid_matches: matches_seen,
        first_match_rank: first_rank,
        hardest_match_rank: last_rank,
        ap: Some(ap_sum / matches_seen as f64),
        inp: Some(matches_seen as f64 / hardest as f64),
        skipped: false,
    }
}

/// Evaluate every query of a distance matrix under the given protocol.
///
/// The CMC curve covers ranks 1..=min(G, 100). Collecting `per_query`
/// is the caller's choice via `keep_per_query`.
pub fn evaluate(
    dist: &DistanceMatrix,
    protocol: FilterProtocol,
    keep_per_query: bool,
) -> Result<EvalReport> {
    let n_queries = dist.n_queries();
    let n_gallery = dist.n_gallery();
    let cmc_len = n_gallery.min(100);

    let per_query: Vec<QueryEval> = (0..n_queries)
        .into_par_iter()
        .map(|qi| {
            let q_pid = dist.query_meta.person_ids[qi];
            let q_cam = dist.query_meta.cam_ids[qi];
            let mut valid = vec![false; n_gallery];
            let mut matches = vec![false; n_gallery];
            for j in 0..n_gallery {
                let same_id = dist.gallery_meta.person_ids[j] == q_pid;
                let same_cam = dist.gallery_meta.cam_ids[j] == q_cam;
                let keep = match protocol {
                    FilterProtocol::CrossCamera => !(same_id && same_cam),
                    FilterProtocol::None => true,
                };
                valid[j] = keep;
                matches[j] = keep && same_id;
            }
            let row = dist.values.row(qi);
            let ranked = rank_gallery(row.as_slice().expect("row-major layout"), &valid);
            query_eval(qi, &ranked, &matches)
        })
        .collect();

    let mut n_evaluated = 0usize;
    let mut map_sum = 0.0;
    let mut minp_sum = 0.0;
    let mut first_rank_hist = vec![0usize; cmc_len + 1];
    for qe in &per_query {
        if qe.skipped {
            continue;
        }
        n_evaluated += 1;
        map_sum += qe.ap.expect("non-skipped query has ap");
        minp_sum += qe.inp.expect("non-skipped query has inp");
        let first = qe.first_match_rank.expect("non-skipped query has a match");
        if first <= cmc_len {
            first_rank_hist[first] += 1;
        }
    }
    if n_evaluated == 0 {
        return Err(Error::AllQueriesSkipped);
    }

    let mut cmc = Vec::with_capacity(cmc_len);
    let mut cumulative = 0usize;
    for k in 1..=cmc_len {
        cumulative += first_rank_hist[k];
        cmc.push(cumulative as f64 / n_evaluated as f64);
    }

    Ok(EvalReport {
        cmc,
        map: map_sum / n_evaluated as f64,
        minp: minp_sum / n_evaluated as f64,
        n_evaluated,
        n_skipped: n_queries - n_evaluated,
        per_query: keep_per_query.then_some(per_query),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distances::{LabelMeta, Metric};
    use ndarray::array;

    #[test]
    fn rank_sorts_by_distance() {
        let ranked = rank_gallery(&[0.3, 0.1, 0.2], &[true, true, true]);
        assert_eq!(ranked, vec![1, 2, 0]);
    }

    #[test]
    fn rank_breaks_ties_by_index() {
        let ranked = rank_gallery(&[0.5, 0.5], &[true, true]);
        assert_eq!(ranked, vec![0, 1]);
    }

    #[test]
    fn rank_drops_invalid_entries() {
        let ranked = rank_gallery(&[0.1, 0.2], &[false, true]);
        assert_eq!(ranked, vec![1]);
    }

    fn eval_at_ranks(match_ranks: &[usize], total: usize) -> QueryEval {
        let ranked: Vec<usize> = (0..total).collect();
        let mut mask = vec![false; total];
        for &r in match_ranks {
            mask[r - 1] = true;
        }
        query_eval(0, &ranked, &mask)
    }

    #[test]
    fn perfect_ranking_has_unit_ap_and_inp() {
        let qe = eval_at_ranks(&[1, 2, 3], 10);
        assert_eq!(qe.ap, Some(1.0));
        assert_eq!(qe.inp, Some(1.0));
        assert_eq!(qe.first_match_rank, Some(1));
        assert_eq!(qe.hardest_match_rank, Some(3));
    }

    #[test]
    fn ap_inp_inversion_between_rank_lists() {
        // List 1 finds matches early but its hardest match is deep;
        // list 2 is the other way around. AP prefers 1, INP prefers 2.
        let a = eval_at_ranks(&[1, 2, 10], 10);
        let b = eval_at_ranks(&[3, 5, 7], 10);
        let ap_a = (1.0 / 1.0 + 2.0 / 2.0 + 3.0 / 10.0) / 3.0;
        let ap_b = (1.0 / 3.0 + 2.0 / 5.0 + 3.0 / 7.0) / 3.0;
        assert_eq!(qe_ap(&a), ap_a);
        assert_eq!(qe_ap(&b), ap_b);
        assert_eq!(a.inp, Some(0.3));
        assert_eq!(b.inp, Some(3.0 / 7.0));
        assert!(qe_ap(&a) > qe_ap(&b));
        assert!(a.inp.unwrap() < b.inp.unwrap());
    }

    fn qe_ap(qe: &QueryEval) -> f64 {
        qe.ap.unwrap()
    }

    #[test]
    fn single_match_collapses_ap_and_inp() {
        for r in 1..=12 {
            let qe = eval_at_ranks(&[r], 12);
            assert_eq!(qe.ap, Some(1.0 / r as f64));
            assert_eq!(qe.inp, Some(1.0 / r as f64));
        }
    }

    #[test]
    fn zero_matches_is_skipped() {
        let qe = eval_at_ranks(&[], 5);
        assert!(qe.skipped);
        assert_eq!(qe.num_valid_matches, 0);
        assert_eq!(qe.ap, None);
        assert_eq!(qe.inp, None);
    }

    fn toy_matrix(
        values: ndarray::Array2<f64>,
        q: (Vec<u32>, Vec<u32>),
        g: (Vec<u32>, Vec<u32>),
    ) -> DistanceMatrix {
        DistanceMatrix::new(
            values,
            Metric::Euclidean,
            LabelMeta {
                person_ids: q.0,
                cam_ids: q.1,
            },
            LabelMeta {
                person_ids: g.0,
                cam_ids: g.1,
            },
        )
        .unwrap()
    }

    #[test]
    fn all_queries_skipped_when_filter_removes_every_match() {
        // The only same-id gallery entry shares the query's camera.
        let dist = toy_matrix(
            array![[0.1, 0.2]],
            (vec![7], vec![0]),
            (vec![7, 8], vec![0, 1]),
        );
        assert!(matches!(
            evaluate(&dist, FilterProtocol::CrossCamera, false),
            Err(Error::AllQueriesSkipped)
        ));
    }

    #[test]
    fn skipped_queries_are_excluded_from_averages() {
        // Query 0 keeps one cross-camera match at rank 1; query 1 loses
        // its only match to the filter and is skipped.
        let dist = toy_matrix(
            array![[0.1, 0.9], [0.9, 0.1]],
            (vec![1, 2], vec![0, 0]),
            (vec![1, 2], vec![1, 0]),
        );
        let report = evaluate(&dist, FilterProtocol::CrossCamera, true).unwrap();
        assert_eq!(report.n_evaluated, 1);
        assert_eq!(report.n_skipped, 1);
        assert_eq!(report.map, 1.0);
        assert_eq!(report.minp, 1.0);
        let per_query = report.per_query.unwrap();
        assert!(!per_query[0].skipped);
        assert!(per_query[1].skipped);
    }

    #[test]
    fn cmc_curve_is_monotone_and_capped() {
        let dist = toy_matrix(
            array![[0.5, 0.1, 0.3], [0.2, 0.6, 0.4]],
            (vec![1, 2], vec![0, 0]),
            (vec![1, 2, 1], vec![1, 1, 2]),
        );
        let report = evaluate(&dist, FilterProtocol::CrossCamera, false).unwrap();
        assert_eq!(report.cmc.len(), 3);
        for w in report.cmc.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(*report.cmc.last().unwrap() <= 1.0);
    }
}
