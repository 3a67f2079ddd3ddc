//! Loss kernels: identity (label-smoothed cross-entropy), contrastive,
//! binary verification, margin triplet, OIM, weighted regularized
//! triplet, center loss, and the weighted total.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, Axis};

use super::{log_sum_exp, sigmoid, softplus, BatchLabels, LossValueGrad, MemoryBank};
use crate::error::{Error, Result};

fn one_grad(name: &str, grad: ArrayD<f64>) -> BTreeMap<String, ArrayD<f64>> {
    let mut grads = BTreeMap::new();
    grads.insert(name.to_string(), grad);
    grads
}

fn scalar_grad(name: &str, grad: f64) -> BTreeMap<String, ArrayD<f64>> {
    one_grad(name, ArrayD::from_elem(ndarray::IxDyn(&[]), grad))
}

/// Softmax cross-entropy over logits against label-smoothed targets.
///
/// The target puts `1 - (C-1)/C * eps` on the true class and `eps / C`
/// elsewhere (C = number of classes), so it always sums to one. The
/// loss is averaged over the batch; the gradient is with respect to
/// the logits.
pub fn identity_loss(
    logits: &Array2<f64>,
    labels: &BatchLabels,
    smoothing: f64,
) -> Result<LossValueGrad> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if labels.n_classes != c {
        return Err(Error::ShapeMismatch(format!(
            "labels declare {} classes but logits have {} columns",
            labels.n_classes, c
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::BadParams(format!(
            "smoothing must be in [0, 1), got {smoothing}"
        )));
    }

    let off_target = smoothing / c as f64;
    let on_target = 1.0 - (c as f64 - 1.0) / c as f64 * smoothing;
    let inv_n = 1.0 / n as f64;

    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((n, c));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels.person_ids[i];
        let row_slice = row.as_slice().expect("contiguous row");
        let lse = log_sum_exp(row_slice);
        let mut loss_i = 0.0;
        for (j, &logit) in row_slice.iter().enumerate() {
            let log_p = logit - lse;
            let q = if j == y { on_target } else { off_target };
            loss_i -= q * log_p;
            grad[[i, j]] = ((log_p).exp() - q) * inv_n;
        }
        value += loss_i;
    }
    value *= inv_n;

    Ok(LossValueGrad {
        value,
        grads: one_grad("logits", grad.into_dyn()),
    })
}

/// Contrastive pair loss: `d^2` for a positive pair, `max(0, margin - d)^2`
/// for a negative pair. Gradient is with respect to the distance.
pub fn contrastive_loss(d: f64, same_id: bool, margin: f64) -> Result<LossValueGrad> {
    if !(margin > 0.0) {
        return Err(Error::BadParams(format!("margin must be > 0, got {margin}")));
    }
    if d < 0.0 {
        return Err(Error::BadParams(format!("distance must be >= 0, got {d}")));
    }
    let (value, grad) = if same_id {
        (d * d, 2.0 * d)
    } else if d < margin {
        let gap = margin - d;
        (gap * gap, -2.0 * gap)
    } else {
        (0.0, 0.0)
    };
    Ok(LossValueGrad {
        value,
        grads: scalar_grad("distance", grad),
    })
}

const PROB_CLAMP: f64 = 1e-12;

/// Binary cross-entropy on the predicted positive-pair probability.
/// The probability is clamped away from 0 and 1 before the logs.
pub fn verification_loss(p_pos: f64, same_id: bool) -> LossValueGrad {
    let p = p_pos.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (value, grad) = if same_id {
        (-p.ln(), -1.0 / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    };
    LossValueGrad {
        value,
        grads: scalar_grad("p_pos", grad),
    }
}

/// Margin triplet hinge `max(margin + d_pos - d_neg, 0)`; subgradient 0
/// at the kink.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<LossValueGrad> {
    if d_pos < 0.0 || d_neg < 0.0 {
        return Err(Error::BadParams(format!(
            "distances must be >= 0, got d_pos={d_pos}, d_neg={d_neg}"
        )));
    }
    let slack = margin + d_pos - d_neg;
    let (value, g_pos, g_neg) = if slack > 0.0 {
        (slack, 1.0, -1.0)
    } else {
        (0.0, 0.0, 0.0)
    };
    let mut grads = scalar_grad("d_pos", g_pos);
    grads.extend(scalar_grad("d_neg", g_neg));
    Ok(LossValueGrad { value, grads })
}

/// Memory-bank classification loss: negative log softmax of the bank
/// scores `v_k . f / temperature` at the true class. The gradient is
/// with respect to the feature; the bank itself is read-only here.
pub fn oim_loss(feature: &Array1<f64>, label: usize, bank: &MemoryBank) -> Result<LossValueGrad> {
    let (c, d) = bank.vectors.dim();
    if feature.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "feature has {} dims, bank stores {}-dim vectors",
            feature.len(),
            d
        )));
    }
    if label >= c {
        return Err(Error::BadLabel(format!(
            "label {label} out of range for bank of {c} classes"
        )));
    }
    let inv_tau = 1.0 / bank.temperature;
    let scores: Vec<f64> = bank
        .vectors
        .rows()
        .into_iter()
        .map(|v| v.dot(feature) * inv_tau)
        .collect();
    let lse = log_sum_exp(&scores);
    let value = lse - scores[label];

    let mut grad = Array1::<f64>::zeros(d);
    for (k, v) in bank.vectors.rows().into_iter().enumerate() {
        let p = (scores[k] - lse).exp();
        let coeff = (p - if k == label { 1.0 } else { 0.0 }) * inv_tau;
        grad.scaled_add(coeff, &v);
    }
    Ok(LossValueGrad {
        value,
        grads: one_grad("feature", grad.into_dyn()),
    })
}

/// Weighted regularized triplet loss over a batch distance matrix.
///
/// For each anchor the positives are same-id rows (excluding the
/// anchor) and the negatives are different-id rows. Positive weights
/// are a softmax over the positive distances, negative weights a
/// softmax over negated negative distances, so each set sums to one
/// and no margin parameter is needed. The per-anchor loss is
/// softplus(weighted positive sum - weighted negative sum), averaged
/// over anchors. Only the anchor's own row of `batch_dist` is read,
/// and the gradient covers every off-diagonal entry read that way.
pub fn weighted_regularized_triplet(
    batch_dist: &Array2<f64>,
    labels: &BatchLabels,
) -> Result<LossValueGrad> {
    let (n, m) = batch_dist.dim();
    if n != m {
        return Err(Error::ShapeMismatch(format!(
            "batch distance matrix must be square, got {n}x{m}"
        )));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} batch rows",
            labels.len()
        )));
    }

    let ids = &labels.person_ids;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((n, n));

    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && ids[j] == ids[i]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&k| ids[k] != ids[i]).collect();
        if positives.is_empty() {
            return Err(Error::DegenerateBatch(format!(
                "anchor {i} has no positive"
            )));
        }
        if negatives.is_empty() {
            return Err(Error::DegenerateBatch(format!(
                "anchor {i} has no negative"
            )));
        }

        let pos_d: Vec<f64> = positives.iter().map(|&j| batch_dist[[i, j]]).collect();
        let neg_d: Vec<f64> = negatives.iter().map(|&k| batch_dist[[i, k]]).collect();
        let pos_w = softmax(&pos_d);
        let neg_w = softmax(&neg_d.iter().map(|&d| -d).collect::<Vec<_>>());

        let pos_sum: f64 = pos_w.iter().zip(&pos_d).map(|(w, d)| w * d).sum();
        let neg_sum: f64 = neg_w.iter().zip(&neg_d).map(|(w, d)| w * d).sum();
        let slack = pos_sum - neg_sum;
        value += softplus(slack);

        // d softplus(s)/d s = sigmoid(s); the weights depend on the
        // distances too, which folds into the (1 + d - sum) factors.
        let sig = sigmoid(slack) * inv_n;
        for ((&j, &w), &d) in positives.iter().zip(&pos_w).zip(&pos_d) {
            grad[[i, j]] += sig * w * (1.0 + d - pos_sum);
        }
        for ((&k, &w), &d) in negatives.iter().zip(&neg_w).zip(&neg_d) {
            grad[[i, k]] -= sig * w * (1.0 + neg_sum - d);
        }
    }
    value *= inv_n;

    Ok(LossValueGrad {
        value,
        grads: one_grad("batch_dist", grad.into_dyn()),
    })
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|&v| (v - lse).exp()).collect()
}

/// Mean squared distance to the per-class centers, halved:
/// `1/(2N) * sum_i |f_i - c_{y_i}|^2`. Gradients cover both the
/// features and the centers.
pub fn center_loss(
    features: &Array2<f64>,
    labels: &BatchLabels,
    centers: &Array2<f64>,
) -> Result<LossValueGrad> {
    let (n, d) = features.dim();
    let (c, dc) = centers.dim();
    if dc != d {
        return Err(Error::ShapeMismatch(format!(
            "features have {d} dims, centers have {dc}"
        )));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if labels.n_classes != c {
        return Err(Error::ShapeMismatch(format!(
            "labels declare {} classes but {c} centers given",
            labels.n_classes
        )));
    }

    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_f = Array2::<f64>::zeros((n, d));
    let mut grad_c = Array2::<f64>::zeros((c, d));
    for i in 0..n {
        let y = labels.person_ids[i];
        let diff = &features.index_axis(Axis(0), i) - &centers.index_axis(Axis(0), y);
        value += diff.dot(&diff);
        grad_f.row_mut(i).assign(&(&diff * inv_n));
        let mut center_row = grad_c.row_mut(y);
        center_row += &(&diff * -inv_n);
    }
    value *= 0.5 * inv_n;

    let mut grads = one_grad("features", grad_f.into_dyn());
    grads.extend(one_grad("centers", grad_c.into_dyn()));
    Ok(LossValueGrad { value, grads })
}

/// Weighted sum `id + beta1 * center + beta2 * wrt` of loss components.
/// Gradients over the same input name are summed with the same weights
/// and must agree in shape.
pub fn total_loss(
    id: &LossValueGrad,
    center: &LossValueGrad,
    wrt: &LossValueGrad,
    beta1: f64,
    beta2: f64,
) -> LossValueGrad {
    let value = id.value + beta1 * center.value + beta2 * wrt.value;
    let mut grads: BTreeMap<String, ArrayD<f64>> = id.grads.clone();
    for (component, weight) in [(center, beta1), (wrt, beta2)] {
        for (name, grad) in &component.grads {
            let weighted = grad * weight;
            match grads.get_mut(name) {
                Some(existing) => {
                    assert_eq!(
                        existing.shape(),
                        weighted.shape(),
                        "gradient {name:?} shape disagreement"
                    );
                    *existing += &weighted;
                }
                None => {
                    grads.insert(name.clone(), weighted);
                }
            }
        }
    }
    LossValueGrad { value, grads }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(ids: &[usize], n_classes: usize) -> BatchLabels {
        BatchLabels::new(ids.to_vec(), n_classes).unwrap()
    }

    #[test]
    fn smoothed_targets_match_hand_values() {
        // eps = 0.1 over 10 classes puts 0.91 on the true class and
        // 0.01 elsewhere.
        let c = 10.0_f64;
        let eps = 0.1;
        let on = 1.0 - (c - 1.0) / c * eps;
        let off = eps / c;
        assert!((on - 0.91).abs() < 1e-15);
        assert!((off - 0.01).abs() < 1e-15);
        assert!((on + 9.0 * off - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_loss_saturated_logits_vanish() {
        let mut logits = Array2::<f64>::zeros((1, 4));
        logits[[0, 2]] = 50.0;
        let out = identity_loss(&logits, &labels(&[2], 4), 0.0).unwrap();
        assert!(out.value >= 0.0 && out.value < 1e-15, "{}", out.value);
    }

    #[test]
    fn identity_loss_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 17] {
            let logits = Array2::<f64>::zeros((3, c));
            let out = identity_loss(&logits, &labels(&[0, 1, 0], c), 0.0).unwrap();
            assert!((out.value - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_loss_smoothed_targets_sum_to_one() {
        // The gradient at uniform softmax recovers softmax - q, so the
        // target mass is visible through it: sum_j q_ij must be 1.
        for (c, eps) in [(3usize, 0.0), (7, 0.1), (11, 0.55), (4, 0.9)] {
            let logits = Array2::<f64>::zeros((2, c));
            let out = identity_loss(&logits, &labels(&[1, 0], c), eps).unwrap();
            let grad = out.grad("logits");
            for i in 0..2 {
                let q_sum: f64 = (0..c).map(|j| 1.0 / c as f64 - grad[[i, j]] * 2.0).sum();
                assert!((q_sum - 1.0).abs() < 1e-12, "eps={eps} c={c}: {q_sum}");
            }
        }
    }

    #[test]
    fn identity_loss_rejects_bad_smoothing() {
        let logits = Array2::<f64>::zeros((1, 3));
        assert!(matches!(
            identity_loss(&logits, &labels(&[0], 3), 1.0),
            Err(Error::BadParams(_))
        ));
    }

    #[test]
    fn contrastive_branches() {
        let same = contrastive_loss(0.5, true, 1.0).unwrap();
        assert_eq!(same.value, 0.25);
        let beyond = contrastive_loss(2.0, false, 1.0).unwrap();
        assert_eq!(beyond.value, 0.0);
        assert_eq!(beyond.grad_scalar("distance"), 0.0);
        let inside = contrastive_loss(0.4, false, 1.0).unwrap();
        assert!((inside.value - 0.36).abs() < 1e-15);
    }

    #[test]
    fn verification_values() {
        let confident = verification_loss(1.0 - 1e-12, true);
        assert!(confident.value < 1e-11);
        let coin = verification_loss(0.5, true);
        assert!((coin.value - std::f64::consts::LN_2).abs() < 1e-15);
        let wrong = verification_loss(0.9, false);
        assert!((wrong.value - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn triplet_values() {
        assert_eq!(triplet_loss(0.2, 1.0, 0.3).unwrap().value, 0.0);
        assert!((triplet_loss(0.7, 0.7, 0.3).unwrap().value - 0.3).abs() < 1e-15);
        assert!((triplet_loss(0.8, 0.5, 0.3).unwrap().value - 0.6).abs() < 1e-15);
    }

    #[test]
    fn oim_aligned_feature_with_small_temperature_saturates() {
        let bank = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 0.01).unwrap();
        let out = oim_loss(&array![1.0, 0.0], 0, &bank).unwrap();
        assert!(out.value < 1e-15, "{}", out.value);
    }

    #[test]
    fn oim_identical_bank_rows_give_ln_c() {
        let bank = MemoryBank::new(Array2::from_elem((5, 3), 0.7), 1.0).unwrap();
        let out = oim_loss(&array![0.3, -1.2, 0.5], 3, &bank).unwrap();
        assert!((out.value - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn oim_two_class_hand_value() {
        let bank = MemoryBank::new(array![[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
        let out = oim_loss(&array![1.0, 0.0], 0, &bank).unwrap();
        let expected = -(1.0_f64.exp() / (1.0_f64.exp() + 1.0)).ln();
        assert!((out.value - expected).abs() < 1e-15);
        assert!((out.value - 0.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn wrt_single_pos_single_neg_is_softplus_of_gap() {
        // 2 ids x 2 instances: each anchor has one positive and two
        // negatives; shrink to one negative by making them equal.
        let d = array![
            [0.0, 0.4, 0.9, 0.9],
            [0.4, 0.0, 0.9, 0.9],
            [0.9, 0.9, 0.0, 0.4],
            [0.9, 0.9, 0.4, 0.0]
        ];
        let out = weighted_regularized_triplet(&d, &labels(&[0, 0, 1, 1], 2)).unwrap();
        // equal negatives make the negative weighting irrelevant
        let expected = softplus(0.4 - 0.9);
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn wrt_equal_pos_neg_distance_gives_ln_two() {
        let d = array![
            [0.0, 0.6, 0.6, 0.6],
            [0.6, 0.0, 0.6, 0.6],
            [0.6, 0.6, 0.0, 0.6],
            [0.6, 0.6, 0.6, 0.0]
        ];
        let out = weighted_regularized_triplet(&d, &labels(&[0, 0, 1, 1], 2)).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn wrt_negative_weights_match_hand_softmax() {
        // Anchor 0: positive at 0.2, negatives at 1.0 and 1.2 with
        // softmax(-d) weights (0.5498.., 0.4502..).
        let d = array![
            [0.0, 0.2, 1.0, 1.2],
            [0.2, 0.0, 1.1, 0.8],
            [1.0, 1.1, 0.0, 0.3],
            [1.2, 0.8, 0.3, 0.0]
        ];
        let batch = labels(&[0, 0, 1, 1], 2);
        let out = weighted_regularized_triplet(&d, &batch).unwrap();

        // literal transcription for anchor 0
        let w_n1 = (-1.0_f64).exp() / ((-1.0_f64).exp() + (-1.2_f64).exp());
        let w_n2 = (-1.2_f64).exp() / ((-1.0_f64).exp() + (-1.2_f64).exp());
        assert!((w_n1 - 0.549834).abs() < 1e-6);
        assert!((w_n2 - 0.450166).abs() < 1e-6);

        // full hand evaluation of all four anchors
        let anchor = |d_p: f64, d_n: &[f64]| {
            let z: f64 = d_n.iter().map(|&x| (-x).exp()).sum();
            let neg: f64 = d_n.iter().map(|&x| (-x).exp() / z * x).sum();
            softplus(d_p - neg)
        };
        let expected = (anchor(0.2, &[1.0, 1.2])
            + anchor(0.2, &[1.1, 0.8])
            + anchor(0.3, &[1.0, 1.1])
            + anchor(0.3, &[1.2, 0.8]))
            / 4.0;
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn wrt_rejects_degenerate_batches() {
        let d = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            weighted_regularized_triplet(&d, &labels(&[0, 0], 1)),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            weighted_regularized_triplet(&d, &labels(&[0, 1], 2)),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn center_loss_values() {
        let centers = array![[0.0, 0.0], [1.0, 1.0]];
        let exact = center_loss(&array![[1.0, 1.0]], &labels(&[1], 2), &centers).unwrap();
        assert_eq!(exact.value, 0.0);

        let single = center_loss(&array![[1.0, 0.0]], &labels(&[0], 2), &centers).unwrap();
        assert!((single.value - 0.5).abs() < 1e-15);

        let pair = center_loss(
            &array![[0.0, 0.0], [2.0, 0.0]],
            &labels(&[0, 0], 2),
            &centers,
        )
        .unwrap();
        assert!((pair.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weights_components() {
        let id = LossValueGrad {
            value: 1.5,
            grads: scalar_grad("logits", 2.0),
        };
        let center = LossValueGrad {
            value: 10.0,
            grads: scalar_grad("features", 4.0),
        };
        let wrt = LossValueGrad {
            value: 0.25,
            grads: scalar_grad("batch_dist", -1.0),
        };
        let total = total_loss(&id, &center, &wrt, 0.0005, 1.0);
        assert!((total.value - (1.5 + 0.0005 * 10.0 + 0.25)).abs() < 1e-15);
        assert_eq!(total.grad_scalar("logits"), 2.0);
        assert_eq!(total.grad_scalar("features"), 0.002);
        assert_eq!(total.grad_scalar("batch_dist"), -1.0);

        let zeroed = total_loss(&id, &center, &wrt, 0.0, 0.0);
        assert_eq!(zeroed.value, id.value);

        let zero = LossValueGrad {
            value: 0.0,
            grads: BTreeMap::new(),
        };
        assert_eq!(total_loss(&zero, &zero, &zero, 0.0005, 1.0).value, 0.0);
    }
}
