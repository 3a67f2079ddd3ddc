//! Pairwise query-to-gallery distance matrices.
//!
//! Squared Euclidean distances are computed blockwise as
//! `||a||^2 + ||b||^2 - 2 a.b`, with the cross term evaluated as a
//! matrix product per query block. Negative round-off is clamped to 0.
//! Rows are independent, so blocks are processed in parallel; every
//! entry is computed by the same arithmetic regardless of block
//! schedule, which keeps the output deterministic across thread counts.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedio::EmbeddingSet;
use crate::error::{Error, Result};

/// Number of query rows handled per block; bounds the temporary
/// cross-term buffer at `block * G` doubles.
pub const QUERY_BLOCK_ROWS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EuclideanSq,
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn token(self) -> &'static str {
        match self {
            Metric::EuclideanSq => "euclidean_sq",
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "euclidean_sq" => Some(Metric::EuclideanSq),
            "euclidean" => Some(Metric::Euclidean),
            "cosine" => Some(Metric::Cosine),
            _ => None,
        }
    }
}

/// Person/camera labels carried along one side of a distance matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMeta {
    pub person_ids: Vec<u32>,
    pub cam_ids: Vec<u32>,
}

impl LabelMeta {
    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }
}

/// Q×G pairwise distances plus the labels of both sides.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub metric: Metric,
    pub query_meta: LabelMeta,
    pub gallery_meta: LabelMeta,
}

impl DistanceMatrix {
    pub fn new(
        values: Array2<f64>,
        metric: Metric,
        query_meta: LabelMeta,
        gallery_meta: LabelMeta,
    ) -> Result<Self> {
        let (q, g) = values.dim();
        if query_meta.len() != q || gallery_meta.len() != g {
            return Err(Error::DimMismatch(format!(
                "matrix is {q}x{g} but labels cover {} queries and {} gallery rows",
                query_meta.len(),
                gallery_meta.len()
            )));
        }
        if let Some((idx, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::BadValue(format!(
                "non-finite distance {v} at flat index {idx}"
            )));
        }
        Ok(Self {
            values,
            metric,
            query_meta,
            gallery_meta,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_gallery(&self) -> usize {
        self.values.ncols()
    }
}

fn row_sq_norms(features: &Array2<f64>) -> Array1<f64> {
    let mut norms = Array1::<f64>::zeros(features.nrows());
    for (i, row) in features.rows().into_iter().enumerate() {
        norms[i] = row.dot(&row);
    }
    norms
}

/// Compute the Q×G distance matrix between two embedding sets.
///
/// `euclidean` is the elementwise square root of `euclidean_sq`;
/// `cosine` is `1 - a.b / (|a||b|)` and rejects all-zero rows.
pub fn pairwise_distance(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    metric: Metric,
) -> Result<DistanceMatrix> {
    if query.dim() != gallery.dim() {
        return Err(Error::DimMismatch(format!(
            "query dim {} != gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let q64 = query.features_f64();
    let g64 = gallery.features_f64();
    let values = match metric {
        Metric::EuclideanSq => cross_distances(&q64, &g64, false)?,
        Metric::Euclidean => cross_distances(&q64, &g64, true)?,
        Metric::Cosine => cosine_distances(&q64, &g64)?,
    };
    DistanceMatrix::new(values, metric, query.label_meta(), gallery.label_meta())
}

fn cross_distances(q: &Array2<f64>, g: &Array2<f64>, take_sqrt: bool) -> Result<Array2<f64>> {
    let q_norms = row_sq_norms(q);
    let g_norms = row_sq_norms(g);
    let mut values = Array2::<f64>::zeros((q.nrows(), g.nrows()));

    values
        .axis_chunks_iter_mut(ndarray::Axis(0), QUERY_BLOCK_ROWS)
        .into_par_iter()
        .enumerate()
        .for_each(|(block_idx, mut out)| {
            let start = block_idx * QUERY_BLOCK_ROWS;
            let rows = out.nrows();
            let q_block = q.slice(s![start..start + rows, ..]);
            // out = -2 * q_block . g^T
            general_mat_mul(-2.0, &q_block, &g.t(), 0.0, &mut out);
            for (bi, mut row) in out.rows_mut().into_iter().enumerate() {
                let qn = q_norms[start + bi];
                for (j, v) in row.iter_mut().enumerate() {
                    let d = qn + g_norms[j] + *v;
                    let d = if d < 0.0 { 0.0 } else { d };
                    *v = if take_sqrt { d.sqrt() } else { d };
                }
            }
        });
    Ok(values)
}

fn cosine_distances(q: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
    let q_norms = row_sq_norms(q).mapv(f64::sqrt);
    let g_norms = row_sq_norms(g).mapv(f64::sqrt);
    if let Some(row) = q_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroVector { side: "query", row });
    }
    if let Some(row) = g_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroVector {
            side: "gallery",
            row,
        });
    }
    let mut values = Array2::<f64>::zeros((q.nrows(), g.nrows()));
    values
        .axis_chunks_iter_mut(ndarray::Axis(0), QUERY_BLOCK_ROWS)
        .into_par_iter()
        .enumerate()
        .for_each(|(block_idx, mut out)| {
            let start = block_idx * QUERY_BLOCK_ROWS;
            let rows = out.nrows();
            let q_block = q.slice(s![start..start + rows, ..]);
            general_mat_mul(1.0, &q_block, &g.t(), 0.0, &mut out);
            for (bi, mut row) in out.rows_mut().into_iter().enumerate() {
                let qn = q_norms[start + bi];
                for (j, v) in row.iter_mut().enumerate() {
                    let d = 1.0 - *v / (qn * g_norms[j]);
                    *v = if d < 0.0 { 0.0 } else { d };
                }
            }
        });
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(features: Array2<f32>, name: &str) -> EmbeddingSet {
        let n = features.nrows();
        EmbeddingSet::new(features, vec![0; n], vec![0; n], name).unwrap()
    }

    #[test]
    fn three_four_five_triangle() {
        let a = set(array![[0.0, 0.0]], "q");
        let b = set(array![[3.0, 4.0]], "g");
        let d = pairwise_distance(&a, &b, Metric::Euclidean).unwrap();
        assert_eq!(d.values[[0, 0]], 5.0);
        let d2 = pairwise_distance(&a, &b, Metric::EuclideanSq).unwrap();
        assert_eq!(d2.values[[0, 0]], 25.0);
    }

    #[test]
    fn identical_rows_have_zero_distance() {
        let a = set(array![[1.5, -2.25, 0.5]], "q");
        for metric in [Metric::EuclideanSq, Metric::Euclidean, Metric::Cosine] {
            let d = pairwise_distance(&a, &a, metric).unwrap();
            assert_eq!(d.values[[0, 0]], 0.0, "metric {metric:?}");
        }
    }

    #[test]
    fn orthogonal_vectors_cosine_distance_is_one() {
        let a = set(array![[1.0, 0.0]], "q");
        let b = set(array![[0.0, 1.0]], "g");
        let d = pairwise_distance(&a, &b, Metric::Cosine).unwrap();
        assert_eq!(d.values[[0, 0]], 1.0);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let a = set(array![[1.0, 0.0]], "q");
        let b = set(array![[0.0, 0.0]], "g");
        match pairwise_distance(&a, &b, Metric::Cosine) {
            Err(Error::ZeroVector { side: "gallery", row: 0 }) => {}
            other => panic!("expected ZeroVector, got {other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = set(array![[1.0, 0.0]], "q");
        let b = set(array![[1.0, 0.0, 0.0]], "g");
        assert!(matches!(
            pairwise_distance(&a, &b, Metric::Euclidean),
            Err(Error::DimMismatch(_))
        ));
    }
}
