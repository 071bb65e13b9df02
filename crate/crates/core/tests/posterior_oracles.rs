#![allow(clippy::needless_range_loop)]

mod common;

use bpinn::analytic_bayes::*;
use bpinn::forward_ops::*;
use bpinn::ImageGrid;
use common::*;
use rand::Rng;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    d / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn mean_matches_brute_force_minimizer() {
    let mut r = rng(10);
    for _ in 0..5 {
        let psf = random_psf(3, &mut r);
        let op = Convolution::new((8, 8), psf.clone()).unwrap();
        let f = random_image(8, 8, &mut r);
        let mut g = convolve_2d(&f, &psf).unwrap();
        for v in g.values_mut() {
            *v += 0.05 * r.random_range(-1.0..1.0);
        }
        let f_bar = ImageGrid::filled(8, 8, r.random_range(-0.5..0.5));
        let prior = NoisePrior::new(0.01, 0.1, f_bar.clone()).unwrap();
        let (mean, rep) = posterior_mean(&op, &g, &prior, 1e-13, 500).unwrap();
        assert!(rep.converged);
        let h = matrix_of((8, 8), |x| naive_convolve(x, &psf));
        let oracle = gd_minimizer(&h, g.values(), f_bar.values(), 0.01, 0.1);
        assert!(
            rel(mean.values(), &oracle) <= 1e-8,
            "{}",
            rel(mean.values(), &oracle)
        );
    }
}

fn normal_matrix(h: &Mat, lambda: f64) -> Mat {
    let mut a = matmul(&transpose(h), h);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    a
}

#[test]
fn dense_variance_matches_explicit_inverse() {
    let mut r = rng(11);
    for _ in 0..5 {
        let psf = random_psf(3, &mut r);
        let op = Convolution::new((8, 8), psf.clone()).unwrap();
        let prior = NoisePrior::centered(0.02, 0.5, (8, 8)).unwrap();
        let (var, _) = posterior_variance_diag(&op, &prior, VarianceMethod::Dense).unwrap();
        let h = matrix_of((8, 8), |x| naive_convolve(x, &psf));
        let inv = gauss_jordan_inverse(&normal_matrix(&h, prior.lambda()));
        for i in 0..64 {
            let expect = 0.02 * inv[i][i];
            assert!(
                (var.values()[i] - expect).abs() <= 1e-10 * expect.abs().max(1e-300),
                "pixel {i}"
            );
        }
    }
}

#[test]
fn hutchinson_close_to_dense() {
    let mut r = rng(12);
    let psf = random_psf(3, &mut r);
    let op = Convolution::new((6, 6), psf).unwrap();
    let prior = NoisePrior::centered(0.01, 0.1, (6, 6)).unwrap();
    let (exact, _) = posterior_variance_diag(&op, &prior, VarianceMethod::Dense).unwrap();
    let (est, rep) = posterior_variance_diag(
        &op,
        &prior,
        VarianceMethod::Hutchinson {
            probes: 2000,
            seed: 3,
        },
    )
    .unwrap();
    assert!(rep.converged);
    for (e, x) in est.values().iter().zip(exact.values()) {
        assert!((e - x).abs() <= 0.05 * x, "{e} vs {x}");
    }
    let (again, _) = posterior_variance_diag(
        &op,
        &prior,
        VarianceMethod::Hutchinson {
            probes: 2000,
            seed: 3,
        },
    )
    .unwrap();
    assert_eq!(est, again);
}

#[test]
fn cg_matches_gaussian_elimination() {
    let mut r = rng(13);
    let n = 20;
    let m: Mat = (0..n)
        .map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let mut a = matmul(&transpose(&m), &m);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 0.5;
    }
    let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let (x, rep) = cg_solve(
        |v, out| {
            for (o, row) in out.iter_mut().zip(&a) {
                *o = row.iter().zip(v).map(|(p, q)| p * q).sum();
            }
        },
        &b,
        1e-13,
        200,
    );
    assert!(rep.converged);
    let oracle = gaussian_solve(&a, &b);
    assert!(rel(&x, &oracle) <= 1e-10);
}

#[test]
fn identity_operator_closed_form() {
    let g = ImageGrid::from_fn(4, 4, |y, x| (y as f64) - 0.5 * x as f64);
    let f_bar = ImageGrid::filled(4, 4, 0.25);
    let prior = NoisePrior::new(0.3, 0.3, f_bar.clone()).unwrap();
    let op = Identity::new((4, 4));
    let (est, _) = posterior(&op, &g, &prior, 1e-12, 50, VarianceMethod::Dense).unwrap();
    assert_eq!(est.lambda, 1.0);
    for i in 0..16 {
        let expect = (g.values()[i] + f_bar.values()[i]) / 2.0;
        assert!((est.mean.values()[i] - expect).abs() < 1e-12);
        assert!((est.var_diag.values()[i] - 0.15).abs() < 1e-12);
    }
}

#[test]
fn supervised_posterior_matches_dense_normal_equations() {
    let mut r = rng(14);
    let psf = random_psf(3, &mut r);
    let op = Convolution::new((6, 6), psf.clone()).unwrap();
    let g = random_image(6, 6, &mut r);
    let f_t = random_image(6, 6, &mut r);
    let f_bar = ImageGrid::filled(6, 6, 0.1);
    let (v_eps, v0, v_ft) = (0.05, 0.4, 0.2);
    let prior = NoisePrior::new(v_eps, v0, f_bar.clone()).unwrap();
    let (est, _) = supervised_posterior(
        &op,
        &g,
        &f_t,
        v_ft,
        &prior,
        1e-13,
        500,
        VarianceMethod::Dense,
    )
    .unwrap();

    let h = matrix_of((6, 6), |x| naive_convolve(x, &psf));
    let mut a = matmul(&transpose(&h), &h);
    for row in a.iter_mut() {
        for v in row.iter_mut() {
            *v /= v_eps;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0 / v_ft + 1.0 / v0;
    }
    let htg = matvec(&transpose(&h), g.values());
    let b: Vec<f64> = (0..36)
        .map(|i| htg[i] / v_eps + f_t.values()[i] / v_ft + f_bar.values()[i] / v0)
        .collect();
    let mean = gaussian_solve(&a, &b);
    assert!(rel(est.mean.values(), &mean) <= 1e-9);
    let inv = gauss_jordan_inverse(&a);
    for i in 0..36 {
        assert!((est.var_diag.values()[i] - inv[i][i]).abs() <= 1e-10 * inv[i][i]);
    }
}

#[test]
fn variance_bounded_by_prior_and_decreasing_in_noise() {
    let op = Convolution::new((5, 5), PsfKernel::gaussian(3, 0.7).unwrap()).unwrap();
    let lo = NoisePrior::centered(0.001, 0.1, (5, 5)).unwrap();
    let hi = NoisePrior::centered(0.1, 0.1, (5, 5)).unwrap();
    let (vlo, _) = posterior_variance_diag(&op, &lo, VarianceMethod::Dense).unwrap();
    let (vhi, _) = posterior_variance_diag(&op, &hi, VarianceMethod::Dense).unwrap();
    for (a, b) in vlo.values().iter().zip(vhi.values()) {
        assert!(*a > 0.0 && *a <= 0.1 && *b <= 0.1);
        assert!(a < b);
    }
}

#[test]
fn cg_nonconvergence_is_reported() {
    let op = Convolution::new((16, 16), PsfKernel::gaussian(5, 2.0).unwrap()).unwrap();
    let g = ImageGrid::from_fn(16, 16, |y, x| ((y * x) % 7) as f64);
    let prior = NoisePrior::centered(1e-6, 1.0, (16, 16)).unwrap();
    let (_, rep) = posterior_mean(&op, &g, &prior, 1e-14, 3).unwrap();
    assert!(!rep.converged);
    assert_eq!(rep.iterations, 3);
    assert!(rep.final_residual_norm > 1e-14);
}
