//! Dot-product non-local attention over a set of positions.
//!
//! Each position's response aggregates every position: affinities are
//! plain dot products of the theta/phi projections, normalized by the
//! number of positions (the dot-product variant), applied to the g
//! projection, projected back by `w_z`, scaled, and added residually:
//!
//! `out = x + scale * ((theta(x) . phi(x)^T / N) . g(x)) . w_z`
//!
//! The scale models the zero-initialized affine factor after the `w_z`
//! projection: at scale = 0 the block is the elementwise identity, so
//! it can be inserted into a trained network without changing it.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Projection matrices and the output-side scale of one block.
///
/// `w_theta`, `w_phi`, `w_g` are C x Cb with bottleneck Cb <= C;
/// `w_z` maps Cb back to C.
#[derive(Debug, Clone)]
pub struct NonlocalWeights {
    pub w_theta: Array2<f64>,
    pub w_phi: Array2<f64>,
    pub w_g: Array2<f64>,
    pub w_z: Array2<f64>,
    pub scale: f64,
}

impl NonlocalWeights {
    fn check(&self, x: &Array2<f64>) -> Result<(usize, usize, usize)> {
        let (n, c) = x.dim();
        let cb = self.w_theta.ncols();
        for (name, w, rows, cols) in [
            ("w_theta", &self.w_theta, c, cb),
            ("w_phi", &self.w_phi, c, cb),
            ("w_g", &self.w_g, c, cb),
            ("w_z", &self.w_z, cb, c),
        ] {
            if w.dim() != (rows, cols) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected {rows}x{cols}",
                    w.dim()
                )));
            }
        }
        if cb > c {
            return Err(Error::ShapeMismatch(format!(
                "bottleneck {cb} exceeds channel count {c}"
            )));
        }
        if cb == 0 || n == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "degenerate shapes: N={n}, C={c}, Cb={cb}"
            )));
        }
        Ok((n, c, cb))
    }
}

/// Forward pass; `x` is N positions by C channels.
pub fn nonlocal_forward(x: &Array2<f64>, weights: &NonlocalWeights) -> Result<Array2<f64>> {
    let (n, _, _) = weights.check(x)?;
    let theta = x.dot(&weights.w_theta);
    let phi = x.dot(&weights.w_phi);
    let g = x.dot(&weights.w_g);
    let affinity = theta.dot(&phi.t()) / n as f64;
    let pooled = affinity.dot(&g);
    let z = pooled.dot(&weights.w_z);
    Ok(x + &(z * weights.scale))
}

/// Gradients of a scalar objective with respect to the input and every
/// weight, given the objective's gradient at the block output.
#[derive(Debug, Clone)]
pub struct NonlocalGrads {
    pub x: Array2<f64>,
    pub w_theta: Array2<f64>,
    pub w_phi: Array2<f64>,
    pub w_g: Array2<f64>,
    pub w_z: Array2<f64>,
    pub scale: f64,
}

/// Backward pass of [`nonlocal_forward`] for upstream gradient
/// `upstream` of the same shape as the output.
pub fn nonlocal_backward(
    x: &Array2<f64>,
    weights: &NonlocalWeights,
    upstream: &Array2<f64>,
) -> Result<NonlocalGrads> {
    let (n, _, _) = weights.check(x)?;
    if upstream.dim() != x.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.dim(),
            x.dim()
        )));
    }
    let inv_n = 1.0 / n as f64;

    // forward intermediates
    let theta = x.dot(&weights.w_theta);
    let phi = x.dot(&weights.w_phi);
    let g = x.dot(&weights.w_g);
    let affinity = theta.dot(&phi.t()) * inv_n;
    let pooled = affinity.dot(&g);
    let z = pooled.dot(&weights.w_z);

    let grad_scale = (upstream * &z).sum();
    let grad_z = upstream * weights.scale;
    let grad_w_z = pooled.t().dot(&grad_z);
    let grad_pooled = grad_z.dot(&weights.w_z.t());
    let grad_affinity = grad_pooled.dot(&g.t()) * inv_n;
    let grad_g = affinity.t().dot(&grad_pooled);
    let grad_theta = grad_affinity.dot(&phi);
    let grad_phi = grad_affinity.t().dot(&theta);

    let grad_x = upstream
        + &grad_theta.dot(&weights.w_theta.t())
        + &grad_phi.dot(&weights.w_phi.t())
        + &grad_g.dot(&weights.w_g.t());

    Ok(NonlocalGrads {
        x: grad_x,
        w_theta: x.t().dot(&grad_theta),
        w_phi: x.t().dot(&grad_phi),
        w_g: x.t().dot(&grad_g),
        w_z: grad_w_z,
        scale: grad_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_weights(c: usize, cb: usize, scale: f64) -> NonlocalWeights {
        let seq = |rows: usize, cols: usize, step: f64| {
            Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * step).sin())
        };
        NonlocalWeights {
            w_theta: seq(c, cb, 0.7),
            w_phi: seq(c, cb, 1.1),
            w_g: seq(c, cb, 1.7),
            w_z: seq(cb, c, 2.3),
            scale,
        }
    }

    #[test]
    fn zero_scale_is_identity() {
        let x = array![[0.5, -1.0, 2.0], [3.0, 0.25, -0.125]];
        let out = nonlocal_forward(&x, &toy_weights(3, 2, 0.0)).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_position_matches_hand_computation() {
        // N = 1: affinity is the scalar (x w_theta).(x w_phi), and the
        // output is x + scale * affinity * (x w_g) w_z.
        let x = array![[1.0, -2.0]];
        let w = toy_weights(2, 1, 0.5);
        let out = nonlocal_forward(&x, &w).unwrap();

        let theta = x.dot(&w.w_theta)[[0, 0]];
        let phi = x.dot(&w.w_phi)[[0, 0]];
        let g = x.dot(&w.w_g)[[0, 0]];
        let attn = theta * phi * g; // / N with N = 1
        for j in 0..2 {
            let expected = x[[0, j]] + 0.5 * attn * w.w_z[[0, j]];
            assert!((out[[0, j]] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_direct_summation_oracle() {
        // literal double loop over positions, no matrix shortcuts
        let x = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).cos());
        let w = toy_weights(8, 3, 0.8);
        let out = nonlocal_forward(&x, &w).unwrap();

        let n = 4;
        let c = 8;
        let cb = 3;
        let project = |row: usize, weight: &Array2<f64>, col: usize| -> f64 {
            (0..c).map(|k| x[[row, k]] * weight[[k, col]]).sum()
        };
        for i in 0..n {
            for ch in 0..c {
                let mut zi = 0.0;
                for b in 0..cb {
                    let mut pooled = 0.0;
                    for j in 0..n {
                        let mut affinity = 0.0;
                        for a in 0..cb {
                            affinity += project(i, &w.w_theta, a) * project(j, &w.w_phi, a);
                        }
                        pooled += affinity / n as f64 * project(j, &w.w_g, b);
                    }
                    zi += pooled * w.w_z[[b, ch]];
                }
                let expected = x[[i, ch]] + w.scale * zi;
                assert!(
                    (out[[i, ch]] - expected).abs() < 1e-10,
                    "position {i} channel {ch}"
                );
            }
        }
    }

    #[test]
    fn bottleneck_larger_than_channels_rejected() {
        let x = array![[1.0, 2.0]];
        assert!(matches!(
            nonlocal_forward(&x, &toy_weights(2, 3, 1.0)),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
