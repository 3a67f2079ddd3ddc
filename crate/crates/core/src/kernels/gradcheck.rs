//! Central finite-difference verification of every kernel gradient.
//!
//! Each kernel is exercised on randomized instances: the flattened
//! differentiable inputs are perturbed one coordinate at a time with a
//! symmetric step, and the quotient is compared against the analytic
//! gradient. Relative error is measured only where the analytic entry
//! is meaningfully nonzero; instances are drawn away from hinge kinks
//! so the difference quotient is valid.

use ndarray::{Array1, Array2};
use rand::rngs::SmallRng;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{
    center_loss, gem_pool, identity_loss, nonlocal_backward, nonlocal_forward, oim_loss,
    total_loss, triplet_loss, verification_loss, weighted_regularized_triplet, BatchLabels,
    GemParams, MemoryBank, NonlocalWeights,
};
use crate::kernels::contrastive_loss;
use crate::report::f64_17sig;

/// Default symmetric step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default acceptance threshold on the max relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Analytic entries at or below this magnitude are excluded from the
/// relative comparison.
pub const GRAD_FLOOR: f64 = 1e-8;
/// Default generator seed for the randomized instances.
pub const DEFAULT_SEED: u64 = 61;

/// Gradient of `f` at `point` by central differences with step `h`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], h: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .filter(|(a, _)| a.abs() > GRAD_FLOOR)
        .map(|(a, f)| (f - a).abs() / a.abs())
        .fold(0.0, f64::max)
}

fn check_instance<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], analytic: &[f64], h: f64) -> f64 {
    let fd = central_difference(f, point, h);
    max_rel_err(analytic, &fd)
}

/// Outcome of the finite-difference suite for one kernel.
#[derive(Debug, Clone, Serialize)]
pub struct KernelCheck {
    pub kernel: String,
    pub instances: usize,
    #[serde(serialize_with = "f64_17sig")]
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Machine-readable pass/fail table for the whole suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    #[serde(serialize_with = "f64_17sig")]
    pub h: f64,
    #[serde(serialize_with = "f64_17sig")]
    pub tolerance: f64,
    pub seed: u64,
    pub kernels: Vec<KernelCheck>,
    pub all_pass: bool,
}

fn normal(rng: &mut SmallRng, sigma: f64) -> f64 {
    let v: f64 = StandardNormal.sample(rng);
    v * sigma
}

fn normal_matrix(rng: &mut SmallRng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng, sigma))
}

fn check_identity_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let n = rng.random_range(2..=5);
    let c = rng.random_range(3..=8);
    let logits = normal_matrix(rng, n, c, 1.2);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let labels = BatchLabels::new(ids, c).unwrap();
    let smoothing = [0.0, 0.1, 0.3][rng.random_range(0..3)];

    let out = identity_loss(&logits, &labels, smoothing).unwrap();
    let point: Vec<f64> = logits.iter().copied().collect();
    let analytic: Vec<f64> = out.grad("logits").iter().copied().collect();
    check_instance(
        |p| {
            let l = Array2::from_shape_vec((n, c), p.to_vec()).unwrap();
            identity_loss(&l, &labels, smoothing).unwrap().value
        },
        &point,
        &analytic,
        h,
    )
}

fn check_contrastive_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let margin: f64 = rng.random_range(0.3..1.5);
    let same_id = rng.random_bool(0.5);
    let d = loop {
        let d = rng.random_range(0.05..2.0);
        if same_id || (margin - d).abs() > 1e-3 {
            break d;
        }
    };
    let out = contrastive_loss(d, same_id, margin).unwrap();
    check_instance(
        |p| contrastive_loss(p[0], same_id, margin).unwrap().value,
        &[d],
        &[out.grad_scalar("distance")],
        h,
    )
}

fn check_verification_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let same_id = rng.random_bool(0.5);
    let p_pos = rng.random_range(0.05..0.95);
    let out = verification_loss(p_pos, same_id);
    check_instance(
        |p| verification_loss(p[0], same_id).value,
        &[p_pos],
        &[out.grad_scalar("p_pos")],
        h,
    )
}

fn check_triplet_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let margin: f64 = rng.random_range(0.2..1.0);
    let (d_pos, d_neg) = loop {
        let d_pos = rng.random_range(0.0..2.0);
        let d_neg = rng.random_range(0.0..2.0);
        if (margin + d_pos - d_neg).abs() > 1e-3 {
            break (d_pos, d_neg);
        }
    };
    let out = triplet_loss(d_pos, d_neg, margin).unwrap();
    check_instance(
        |p| triplet_loss(p[0], p[1], margin).unwrap().value,
        &[d_pos, d_neg],
        &[out.grad_scalar("d_pos"), out.grad_scalar("d_neg")],
        h,
    )
}

fn check_oim_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let d = rng.random_range(3..=6);
    let c = rng.random_range(3..=7);
    let bank = MemoryBank::new(normal_matrix(rng, c, d, 1.0), rng.random_range(0.5..2.0)).unwrap();
    let feature = Array1::from_shape_fn(d, |_| normal(rng, 1.0));
    let label = rng.random_range(0..c);

    let out = oim_loss(&feature, label, &bank).unwrap();
    let point: Vec<f64> = feature.to_vec();
    let analytic: Vec<f64> = out.grad("feature").iter().copied().collect();
    check_instance(
        |p| {
            oim_loss(&Array1::from_vec(p.to_vec()), label, &bank)
                .unwrap()
                .value
        },
        &point,
        &analytic,
        h,
    )
}

fn random_pk_labels(rng: &mut SmallRng) -> BatchLabels {
    let n_ids = rng.random_range(2..=3);
    let per_id = rng.random_range(2..=3);
    let mut ids = Vec::new();
    for id in 0..n_ids {
        for _ in 0..per_id {
            ids.push(id);
        }
    }
    BatchLabels::new(ids, n_ids).unwrap()
}

fn random_batch_dist(rng: &mut SmallRng, n: usize) -> Array2<f64> {
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(0.1..2.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn check_wrt(rng: &mut SmallRng, h: f64) -> f64 {
    let labels = random_pk_labels(rng);
    let n = labels.len();
    let dist = random_batch_dist(rng, n);

    let out = weighted_regularized_triplet(&dist, &labels).unwrap();
    let point: Vec<f64> = dist.iter().copied().collect();
    let analytic: Vec<f64> = out.grad("batch_dist").iter().copied().collect();
    check_instance(
        |p| {
            let d = Array2::from_shape_vec((n, n), p.to_vec()).unwrap();
            weighted_regularized_triplet(&d, &labels).unwrap().value
        },
        &point,
        &analytic,
        h,
    )
}

fn check_center_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let n = rng.random_range(2..=4);
    let d = rng.random_range(2..=4);
    let c = rng.random_range(2..=3);
    let features = normal_matrix(rng, n, d, 1.0);
    let centers = normal_matrix(rng, c, d, 1.0);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let labels = BatchLabels::new(ids, c).unwrap();

    let out = center_loss(&features, &labels, &centers).unwrap();
    let mut point: Vec<f64> = features.iter().copied().collect();
    point.extend(centers.iter().copied());
    let mut analytic: Vec<f64> = out.grad("features").iter().copied().collect();
    analytic.extend(out.grad("centers").iter().copied());
    check_instance(
        |p| {
            let f = Array2::from_shape_vec((n, d), p[..n * d].to_vec()).unwrap();
            let ct = Array2::from_shape_vec((c, d), p[n * d..].to_vec()).unwrap();
            center_loss(&f, &labels, &ct).unwrap().value
        },
        &point,
        &analytic,
        h,
    )
}

fn check_total_loss(rng: &mut SmallRng, h: f64) -> f64 {
    let n = rng.random_range(2..=3);
    let n_classes = rng.random_range(3..=5);
    let feat_dim = rng.random_range(2..=3);
    let logits = normal_matrix(rng, n, n_classes, 1.2);
    let features = normal_matrix(rng, n, feat_dim, 1.0);
    let centers = normal_matrix(rng, n_classes, feat_dim, 1.0);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
    let labels = BatchLabels::new(ids, n_classes).unwrap();
    let wrt_labels = random_pk_labels(rng);
    let m = wrt_labels.len();
    let batch_dist = random_batch_dist(rng, m);
    let (beta1, beta2) = (0.0005, 1.0);

    let eval = |logits: &Array2<f64>, features: &Array2<f64>, centers: &Array2<f64>, dist: &Array2<f64>| {
        let id = identity_loss(logits, &labels, 0.1).unwrap();
        let ct = center_loss(features, &labels, centers).unwrap();
        let wrt = weighted_regularized_triplet(dist, &wrt_labels).unwrap();
        total_loss(&id, &ct, &wrt, beta1, beta2)
    };
    let out = eval(&logits, &features, &centers, &batch_dist);

    let sizes = [n * n_classes, n * feat_dim, n_classes * feat_dim, m * m];
    let mut point: Vec<f64> = logits.iter().copied().collect();
    point.extend(features.iter().copied());
    point.extend(centers.iter().copied());
    point.extend(batch_dist.iter().copied());
    let mut analytic: Vec<f64> = out.grad("logits").iter().copied().collect();
    analytic.extend(out.grad("features").iter().copied());
    analytic.extend(out.grad("centers").iter().copied());
    analytic.extend(out.grad("batch_dist").iter().copied());

    check_instance(
        |p| {
            let mut offset = 0;
            let mut take = |len: usize| {
                let slice = p[offset..offset + len].to_vec();
                offset += len;
                slice
            };
            let l = Array2::from_shape_vec((n, n_classes), take(sizes[0])).unwrap();
            let f = Array2::from_shape_vec((n, feat_dim), take(sizes[1])).unwrap();
            let ct = Array2::from_shape_vec((n_classes, feat_dim), take(sizes[2])).unwrap();
            let d = Array2::from_shape_vec((m, m), take(sizes[3])).unwrap();
            eval(&l, &f, &ct, &d).value
        },
        &point,
        &analytic,
        h,
    )
}

fn check_gem_pool(rng: &mut SmallRng, h: f64) -> f64 {
    let k = rng.random_range(2..=3);
    let m = rng.random_range(2..=5);
    let maps = Array2::from_shape_fn((k, m), |_| rng.random_range(0.05..2.0));
    let params = GemParams::new((0..k).map(|_| rng.random_range(0.6..6.0)).collect()).unwrap();

    let out = gem_pool(&maps, &params).unwrap();
    let mut worst = 0.0_f64;
    for map_idx in 0..k {
        let mut point: Vec<f64> = maps.row(map_idx).to_vec();
        point.push(params.p[map_idx]);
        let mut analytic: Vec<f64> = out.grad_activations.row(map_idx).to_vec();
        analytic.push(out.grad_p[map_idx]);
        let err = check_instance(
            |p| {
                let row = Array2::from_shape_vec((1, m), p[..m].to_vec()).unwrap();
                let params = GemParams::new(vec![p[m]]).unwrap();
                gem_pool(&row, &params).unwrap().pooled[0]
            },
            &point,
            &analytic,
            h,
        );
        worst = worst.max(err);
    }
    worst
}

fn check_nonlocal(rng: &mut SmallRng, h: f64) -> f64 {
    let n = rng.random_range(2..=3);
    let c = rng.random_range(3..=5);
    let cb = rng.random_range(1..=c);
    let x = normal_matrix(rng, n, c, 0.8);
    let weights = NonlocalWeights {
        w_theta: normal_matrix(rng, c, cb, 0.8),
        w_phi: normal_matrix(rng, c, cb, 0.8),
        w_g: normal_matrix(rng, c, cb, 0.8),
        w_z: normal_matrix(rng, cb, c, 0.8),
        scale: rng.random_range(-1.0..1.0),
    };
    let upstream = normal_matrix(rng, n, c, 1.0);

    // scalar objective: sum(upstream . output)
    let grads = nonlocal_backward(&x, &weights, &upstream).unwrap();
    let sizes = [n * c, c * cb, c * cb, c * cb, cb * c, 1];
    let mut point: Vec<f64> = x.iter().copied().collect();
    for w in [&weights.w_theta, &weights.w_phi, &weights.w_g, &weights.w_z] {
        point.extend(w.iter().copied());
    }
    point.push(weights.scale);
    let mut analytic: Vec<f64> = grads.x.iter().copied().collect();
    for g in [&grads.w_theta, &grads.w_phi, &grads.w_g, &grads.w_z] {
        analytic.extend(g.iter().copied());
    }
    analytic.push(grads.scale);

    check_instance(
        |p| {
            let mut offset = 0;
            let mut take = |len: usize| {
                let slice = p[offset..offset + len].to_vec();
                offset += len;
                slice
            };
            let xs = Array2::from_shape_vec((n, c), take(sizes[0])).unwrap();
            let w = NonlocalWeights {
                w_theta: Array2::from_shape_vec((c, cb), take(sizes[1])).unwrap(),
                w_phi: Array2::from_shape_vec((c, cb), take(sizes[2])).unwrap(),
                w_g: Array2::from_shape_vec((c, cb), take(sizes[3])).unwrap(),
                w_z: Array2::from_shape_vec((cb, c), take(sizes[4])).unwrap(),
                scale: p[p.len() - 1],
            };
            let out = nonlocal_forward(&xs, &w).unwrap();
            (&out * &upstream).sum()
        },
        &point,
        &analytic,
        h,
    )
}

type CheckFn = fn(&mut SmallRng, f64) -> f64;

const KERNELS: [(&str, CheckFn); 10] = [
    ("identity_loss", check_identity_loss),
    ("contrastive_loss", check_contrastive_loss),
    ("verification_loss", check_verification_loss),
    ("triplet_loss", check_triplet_loss),
    ("oim_loss", check_oim_loss),
    ("weighted_regularized_triplet", check_wrt),
    ("center_loss", check_center_loss),
    ("total_loss", check_total_loss),
    ("gem_pool", check_gem_pool),
    ("nonlocal_block", check_nonlocal),
];

/// Run the finite-difference suite over every kernel.
pub fn run_suite(instances: usize, h: f64, tolerance: f64, seed: u64) -> GradCheckReport {
    let mut kernels = Vec::with_capacity(KERNELS.len());
    for (idx, (name, check)) in KERNELS.iter().enumerate() {
        let mut rng = SmallRng::seed_from_u64(
            seed.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let mut worst = 0.0_f64;
        for _ in 0..instances {
            worst = worst.max(check(&mut rng, h));
        }
        kernels.push(KernelCheck {
            kernel: name.to_string(),
            instances,
            max_rel_err: worst,
            pass: worst < tolerance,
        });
    }
    let all_pass = kernels.iter().all(|k| k.pass);
    GradCheckReport {
        h,
        tolerance,
        seed,
        kernels,
        all_pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_recover_quadratic_gradient() {
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[0] * p[1];
        let grads = central_difference(f, &[2.0, -1.0], 1e-6);
        assert!((grads[0] - 1.0).abs() < 1e-8); // 2x + 3y
        assert!((grads[1] - 6.0).abs() < 1e-8); // 3x
    }

    #[test]
    fn suite_smoke_run_passes() {
        let report = run_suite(5, DEFAULT_STEP, DEFAULT_TOLERANCE, DEFAULT_SEED);
        for kernel in &report.kernels {
            assert!(
                kernel.pass,
                "{} max_rel_err {}",
                kernel.kernel, kernel.max_rel_err
            );
        }
        assert!(report.all_pass);
    }
}
