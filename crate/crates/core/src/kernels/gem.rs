//! Generalized-mean pooling: `f_k = (mean_i x_i^{p_k})^{1/p_k}`.
//!
//! Interpolates between average pooling at p = 1 and max pooling as
//! p grows. Activations are clamped at 1e-6 before exponentiation
//! because the root has a singular gradient at zero. Large exponents
//! are evaluated through logs to avoid overflowing `x^p`.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Activation clamp applied before exponentiation.
pub const GEM_CLAMP: f64 = 1e-6;

/// Exponent used when `p * ln x` would push `x^p` toward overflow.
const LOG_PATH_LIMIT: f64 = 650.0;

/// One pooling exponent per feature map, each > 0. The AGW baseline
/// initializes all of them to 3.0.
#[derive(Debug, Clone)]
pub struct GemParams {
    pub p: Vec<f64>,
}

impl GemParams {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = p.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::BadParams(format!(
                "pooling exponents must be finite and > 0, got {bad}"
            )));
        }
        Ok(Self { p })
    }

    pub fn uniform(p: f64, k: usize) -> Result<Self> {
        Self::new(vec![p; k])
    }
}

/// Pooled vector plus gradients for every activation and exponent.
#[derive(Debug, Clone)]
pub struct GemPooled {
    /// One pooled value per feature map.
    pub pooled: Array1<f64>,
    /// d pooled[k] / d activation[k][i]; zero where the clamp is active.
    pub grad_activations: Array2<f64>,
    /// d pooled[k] / d p[k].
    pub grad_p: Array1<f64>,
}

/// Pool K feature maps of M activations each.
pub fn gem_pool(maps: &Array2<f64>, params: &GemParams) -> Result<GemPooled> {
    let (k, m) = maps.dim();
    if k == 0 || m == 0 {
        return Err(Error::EmptyMap(format!(
            "need at least one map with one activation, got {k}x{m}"
        )));
    }
    if params.p.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} exponents for {k} feature maps",
            params.p.len()
        )));
    }

    let mut pooled = Array1::<f64>::zeros(k);
    let mut grad_x = Array2::<f64>::zeros((k, m));
    let mut grad_p = Array1::<f64>::zeros(k);

    for (row, map) in maps.rows().into_iter().enumerate() {
        let p = params.p[row];
        let clamped: Vec<f64> = map.iter().map(|&x| x.max(GEM_CLAMP)).collect();
        let logs: Vec<f64> = clamped.iter().map(|&x| x.ln()).collect();
        let max_exponent = logs
            .iter()
            .map(|&l| (p * l).abs())
            .fold(0.0_f64, f64::max);

        let ln_m = (m as f64).ln();
        let (value, ln_f, weights) = if max_exponent < LOG_PATH_LIMIT {
            // direct evaluation; exact mean at p = 1
            let mean = clamped.iter().map(|&x| x.powf(p)).sum::<f64>() / m as f64;
            let value = mean.powf(1.0 / p);
            let total: f64 = clamped.iter().map(|&x| x.powf(p)).sum();
            let weights: Vec<f64> = clamped.iter().map(|&x| x.powf(p) / total).collect();
            (value, value.ln(), weights)
        } else {
            // log-sum-exp route for large exponents
            let lse = crate::kernels::log_sum_exp(
                &logs.iter().map(|&l| p * l).collect::<Vec<_>>(),
            );
            let ln_f = (lse - ln_m) / p;
            let weights: Vec<f64> = logs.iter().map(|&l| (p * l - lse).exp()).collect();
            (ln_f.exp(), ln_f, weights)
        };
        pooled[row] = value;

        for i in 0..m {
            if map[i] < GEM_CLAMP {
                continue; // clamp region: flat in the raw activation
            }
            // f^(1-p) x^(p-1) / M, evaluated as exp((p-1)(ln x - ln f)) / M
            grad_x[[row, i]] = ((p - 1.0) * (logs[i] - ln_f)).exp() / m as f64;
        }

        // d f / d p = f * (sum_i w_i ln x_i / p - ln(mean x^p) / p^2),
        // with w the softmax of p * ln x and ln(mean) = p * ln f.
        let weighted_log: f64 = weights.iter().zip(&logs).map(|(w, l)| w * l).sum();
        grad_p[row] = value * (weighted_log / p - ln_f / p);
    }

    Ok(GemPooled {
        pooled,
        grad_activations: grad_x,
        grad_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn p_one_is_arithmetic_mean() {
        let maps = array![[0.5, 1.5, 2.5, 3.5]];
        let out = gem_pool(&maps, &GemParams::uniform(1.0, 1).unwrap()).unwrap();
        assert!((out.pooled[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn p_three_hand_value() {
        let maps = array![[1.0, 2.0]];
        let out = gem_pool(&maps, &GemParams::uniform(3.0, 1).unwrap()).unwrap();
        let expected = 4.5_f64.powf(1.0 / 3.0);
        assert!((out.pooled[0] - expected).abs() < 1e-14);
        assert!((out.pooled[0] - 1.6509636244473134).abs() < 1e-12);
    }

    #[test]
    fn large_p_approaches_max_with_mean_deficit_bound() {
        // The mean inside the root keeps the pooled value at least
        // max * M^(-1/p) for any input, so convergence to the max is
        // governed by that factor; at p = 2000 it is within 0.1%.
        let maps = array![[1.0, 2.0, 3.0, 4.0]];
        let out = gem_pool(&maps, &GemParams::uniform(2000.0, 1).unwrap()).unwrap();
        let lower = 4.0 * 4.0_f64.powf(-1.0 / 2000.0);
        assert!(out.pooled[0] >= lower - 1e-12);
        assert!(out.pooled[0] <= 4.0 + 1e-12);
        assert!((out.pooled[0] - 4.0).abs() / 4.0 < 1e-3);
    }

    #[test]
    fn equal_activations_are_a_fixed_point() {
        for p in [0.5, 1.0, 3.0, 64.0] {
            let maps = Array2::from_elem((1, 6), 1.7);
            let out = gem_pool(&maps, &GemParams::uniform(p, 1).unwrap()).unwrap();
            assert!(
                (out.pooled[0] - 1.7).abs() < 1e-12,
                "p={p}: {}",
                out.pooled[0]
            );
        }
    }

    #[test]
    fn monotone_in_each_activation() {
        let base = array![[0.3, 0.9, 1.4]];
        let params = GemParams::uniform(3.0, 1).unwrap();
        let f0 = gem_pool(&base, &params).unwrap().pooled[0];
        for i in 0..3 {
            let mut bumped = base.clone();
            bumped[[0, i]] += 0.05;
            let f1 = gem_pool(&bumped, &params).unwrap().pooled[0];
            assert!(f1 >= f0);
        }
    }

    #[test]
    fn empty_map_rejected() {
        let maps = Array2::<f64>::zeros((1, 0));
        assert!(matches!(
            gem_pool(&maps, &GemParams::uniform(3.0, 1).unwrap()),
            Err(Error::EmptyMap(_))
        ));
    }
}
