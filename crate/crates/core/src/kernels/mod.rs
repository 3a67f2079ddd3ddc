//! Loss, pooling and attention kernels with hand-derived gradients.
//!
//! Every kernel is a pure function returning its value together with
//! the gradient for each differentiable input, so correctness is
//! checkable against central finite differences (see [`gradcheck`]).
//! No autodiff framework is involved: the formulas are evaluated
//! directly in f64.

mod gem;
pub mod gradcheck;
mod losses;
mod nonlocal;

pub use gem::{gem_pool, GemParams, GemPooled};
pub use losses::{
    center_loss, contrastive_loss, identity_loss, oim_loss, total_loss, triplet_loss,
    verification_loss, weighted_regularized_triplet,
};
pub use nonlocal::{nonlocal_backward, nonlocal_forward, NonlocalGrads, NonlocalWeights};

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Scalar loss plus the gradient with respect to every differentiable
/// input, keyed by input name.
#[derive(Debug, Clone)]
pub struct LossValueGrad {
    pub value: f64,
    pub grads: BTreeMap<String, ArrayD<f64>>,
}

impl LossValueGrad {
    pub fn grad(&self, name: &str) -> &ArrayD<f64> {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("kernel produced no gradient named {name:?}"))
    }

    /// Value of a zero-dimensional (scalar) gradient.
    pub fn grad_scalar(&self, name: &str) -> f64 {
        let grad = self.grad(name);
        assert!(grad.ndim() == 0, "gradient {name:?} is not scalar");
        *grad.first().expect("0-d array has one element")
    }
}

/// Class indices for one batch.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub person_ids: Vec<usize>,
    pub n_classes: usize,
}

impl BatchLabels {
    pub fn new(person_ids: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(&bad) = person_ids.iter().find(|&&id| id >= n_classes) {
            return Err(Error::BadLabel(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            person_ids,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }
}

/// Per-class memory of feature vectors with a softmax temperature.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub vectors: ndarray::Array2<f64>,
    pub temperature: f64,
}

impl MemoryBank {
    pub fn new(vectors: ndarray::Array2<f64>, temperature: f64) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::BadParams("memory bank needs at least one class".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::BadParams(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        Ok(Self {
            vectors,
            temperature,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.vectors.nrows()
    }
}

/// log(sum(exp(x))) with max subtraction.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// log(1 + exp(x)) without overflow: max(x, 0) + log1p(exp(-|x|)).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid evaluated from whichever tail is stable.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_large_magnitudes() {
        assert_eq!(softplus(1e4), 1e4);
        assert_eq!(softplus(-1e4), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn batch_labels_reject_out_of_range_ids() {
        assert!(BatchLabels::new(vec![0, 1, 2], 3).is_ok());
        assert!(matches!(
            BatchLabels::new(vec![0, 3], 3),
            Err(Error::BadLabel(_))
        ));
    }
}
