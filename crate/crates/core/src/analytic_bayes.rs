//! Closed-form Gaussian posterior for `g = H f + ε`.
//!
//! With `ε ~ N(0, v_ε I)` and prior `f ~ N(f̄, v_f I)` the posterior is Gaussian with
//!
//! ```text
//! mean  f̂ = (H'H + λI)⁻¹ (H'g + λ f̄),    λ = v_ε / v_f
//! cov   Σ̂ = v_ε (H'H + λI)⁻¹
//! ```
//!
//! The mean is obtained by conjugate gradients on the matrix-free normal operator.
//! The covariance diagonal comes either from an explicit Cholesky inverse (small
//! grids) or from a Rademacher-probe Hutchinson estimator with one CG solve per probe.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::forward_ops::{dense_matrix, LinearOperator, DENSE_MAX_PIXELS};
use crate::grid::{self, ImageGrid};
use crate::rng::stream_rng;

pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAX_ITER: usize = 2000;

/// Homoscedastic noise level and Gaussian prior on the unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrior {
    pub v_eps: f64,
    pub v_f: f64,
    pub f_bar: ImageGrid,
}

impl NoisePrior {
    pub fn new(v_eps: f64, v_f: f64, f_bar: ImageGrid) -> Result<Self> {
        if !(v_eps > 0.0 && v_eps.is_finite()) {
            return Err(invalid(format!("v_eps must be positive, got {v_eps}")));
        }
        if !(v_f > 0.0) {
            return Err(invalid(format!("v_f must be positive, got {v_f}")));
        }
        Ok(Self { v_eps, v_f, f_bar })
    }

    /// Zero prior mean of the given shape.
    pub fn centered(v_eps: f64, v_f: f64, shape: (usize, usize)) -> Result<Self> {
        Self::new(v_eps, v_f, ImageGrid::zeros(shape.0, shape.1))
    }

    pub fn lambda(&self) -> f64 {
        self.v_eps / self.v_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `‖b − A x‖ / ‖b‖`, recomputed from the returned iterate (0 when `b = 0`).
    pub final_residual_norm: f64,
    pub converged: bool,
}

impl CgReport {
    fn merge(self, other: CgReport) -> CgReport {
        CgReport {
            iterations: self.iterations.max(other.iterations),
            final_residual_norm: self.final_residual_norm.max(other.final_residual_norm),
            converged: self.converged && other.converged,
        }
    }

    fn exact() -> CgReport {
        CgReport {
            iterations: 0,
            final_residual_norm: 0.0,
            converged: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub mean: ImageGrid,
    pub var_diag: ImageGrid,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    /// Exact inverse through a dense Cholesky factorization (≤ 64x64 unknowns).
    Dense,
    /// Unbiased stochastic estimate from `probes` Rademacher vectors.
    Hutchinson { probes: usize, seed: u64 },
}

/// Conjugate gradients for a symmetric positive-definite `matvec`.
///
/// Stops when `‖b − A x‖ / ‖b‖ ≤ tol`. The reported residual is recomputed from
/// the final iterate; if recurrence drift leaves it above `tol` the iteration
/// restarts from the true residual until `max_iter` is spent.
pub fn cg_solve<F>(matvec: F, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, CgReport)
where
    F: Fn(&[f64], &mut [f64]),
{
    cg_solve_observed(matvec, b, tol, max_iter, |_, _| {})
}

/// [`cg_solve`] with a callback receiving `(iteration, x)` after every update.
pub fn cg_solve_observed<F, O>(
    matvec: F,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    mut observer: O,
) -> (Vec<f64>, CgReport)
where
    F: Fn(&[f64], &mut [f64]),
    O: FnMut(usize, &[f64]),
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = grid::norm(b);
    if b_norm == 0.0 {
        return (x, CgReport::exact());
    }
    let mut ap = vec![0.0; n];
    let mut r = b.to_vec();
    let mut iterations = 0;

    'restart: loop {
        let mut p = r.clone();
        let mut rs = grid::dot(&r, &r);
        while iterations < max_iter && rs.sqrt() / b_norm > tol {
            ap.iter_mut().for_each(|v| *v = 0.0);
            matvec(&p, &mut ap);
            let p_ap = grid::dot(&p, &ap);
            if !(p_ap > 0.0) {
                break;
            }
            let alpha = rs / p_ap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            iterations += 1;
            observer(iterations, &x);
            let rs_new = grid::dot(&r, &r);
            let beta = rs_new / rs;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rs = rs_new;
        }

        ap.iter_mut().for_each(|v| *v = 0.0);
        matvec(&x, &mut ap);
        for i in 0..n {
            r[i] = b[i] - ap[i];
        }
        let rel = grid::norm(&r) / b_norm;
        if rel <= tol || iterations >= max_iter || rs.sqrt() / b_norm > tol {
            let report = CgReport {
                iterations,
                final_residual_norm: rel,
                converged: rel <= tol,
            };
            return (x, report);
        }
        // recurrence claimed convergence but the true residual disagrees
        continue 'restart;
    }
}

/// `out = (H'H + λ I) x`.
fn normal_matvec(op: &dyn LinearOperator, lambda: f64, x: &[f64], out: &mut [f64]) {
    let (h, w) = op.input_shape();
    let xg = ImageGrid::from_parts(h, w, x.to_vec());
    let hthx = op.adjoint_unchecked(&op.apply_unchecked(&xg));
    for ((o, a), xi) in out.iter_mut().zip(hthx.values()).zip(x) {
        *o = a + lambda * xi;
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// Solves `(H'H + λI) f̂ = H'g + λ f̄`, the minimizer of
/// `‖g − Hf‖²/(2v_ε) + ‖f − f̄‖²/(2v_f)`.
///
/// Non-convergence is reported through the [`CgReport`], not as an error.
pub fn posterior_mean(
    op: &dyn LinearOperator,
    g: &ImageGrid,
    prior: &NoisePrior,
    tol: f64,
    max_iter: usize,
) -> Result<(ImageGrid, CgReport)> {
    let lambda = prior.lambda();
    check_lambda(lambda)?;
    if !(tol > 0.0) {
        return Err(invalid("cg tolerance must be positive"));
    }
    if prior.f_bar.shape() != op.input_shape() {
        return Err(invalid(format!(
            "prior mean shape {:?} does not match operator input {:?}",
            prior.f_bar.shape(),
            op.input_shape()
        )));
    }
    let htg = op.adjoint(g)?;
    let rhs: Vec<f64> = htg
        .values()
        .iter()
        .zip(prior.f_bar.values())
        .map(|(a, m)| a + lambda * m)
        .collect();
    let (x, report) = cg_solve(
        |v, out| normal_matvec(op, lambda, v, out),
        &rhs,
        tol,
        max_iter,
    );
    let (h, w) = op.input_shape();
    Ok((ImageGrid::from_parts(h, w, x), report))
}

/// Per-pixel `diag(v_ε (H'H + λI)⁻¹)`; only `v_eps` and `v_f` of the prior are used.
///
/// Hutchinson estimates are clipped to the exact bounds `[0, v_ε/λ]`.
pub fn posterior_variance_diag(
    op: &dyn LinearOperator,
    prior: &NoisePrior,
    method: VarianceMethod,
) -> Result<(ImageGrid, CgReport)> {
    variance_diag_with(
        op,
        prior.v_eps,
        prior.lambda(),
        method,
        DEFAULT_CG_TOL,
        DEFAULT_CG_MAX_ITER,
    )
}

fn variance_diag_with(
    op: &dyn LinearOperator,
    v_eps: f64,
    lambda: f64,
    method: VarianceMethod,
    tol: f64,
    max_iter: usize,
) -> Result<(ImageGrid, CgReport)> {
    check_lambda(lambda)?;
    let (h, w) = op.input_shape();
    let n = h * w;
    match method {
        VarianceMethod::Dense => {
            if n > DENSE_MAX_PIXELS {
                return Err(invalid(format!(
                    "dense variance limited to {DENSE_MAX_PIXELS} pixels, got {n}"
                )));
            }
            let hm = dense_matrix(op)?;
            let a: DMatrix<f64> = hm.transpose() * &hm + DMatrix::identity(n, n) * lambda;
            let chol = a
                .cholesky()
                .ok_or_else(|| invalid("normal matrix is not positive definite"))?;
            let inv = chol.inverse();
            let diag = (0..n).map(|i| (v_eps * inv[(i, i)]).max(0.0)).collect();
            Ok((ImageGrid::from_parts(h, w, diag), CgReport::exact()))
        }
        VarianceMethod::Hutchinson { probes, seed } => {
            if probes == 0 {
                return Err(invalid("hutchinson needs at least one probe"));
            }
            const CHUNK: usize = 32;
            let starts: Vec<usize> = (0..probes).step_by(CHUNK).collect();
            let partials: Vec<(Vec<f64>, CgReport)> = starts
                .par_iter()
                .map(|&start| {
                    let mut acc = vec![0.0; n];
                    let mut report = CgReport::exact();
                    for k in start..(start + CHUNK).min(probes) {
                        let mut rng = stream_rng(seed, k as u64);
                        let z: Vec<f64> = (0..n)
                            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                            .collect();
                        let (x, rep) = cg_solve(
                            |v, out| normal_matvec(op, lambda, v, out),
                            &z,
                            tol,
                            max_iter,
                        );
                        for i in 0..n {
                            acc[i] += z[i] * x[i];
                        }
                        report = report.merge(rep);
                    }
                    (acc, report)
                })
                .collect();
            let mut sum = vec![0.0; n];
            let mut report = CgReport::exact();
            for (acc, rep) in partials {
                for i in 0..n {
                    sum[i] += acc[i];
                }
                report = report.merge(rep);
            }
            let upper = v_eps / lambda;
            let diag = sum
                .into_iter()
                .map(|s| (v_eps * s / probes as f64).clamp(0.0, upper))
                .collect();
            Ok((ImageGrid::from_parts(h, w, diag), report))
        }
    }
}

/// Mean and variance diagonal of the unsupervised posterior in one call.
pub fn posterior(
    op: &dyn LinearOperator,
    g: &ImageGrid,
    prior: &NoisePrior,
    tol: f64,
    max_iter: usize,
    method: VarianceMethod,
) -> Result<(PosteriorEstimate, CgReport)> {
    let (mean, rep_mean) = posterior_mean(op, g, prior, tol, max_iter)?;
    let (var_diag, rep_var) =
        variance_diag_with(op, prior.v_eps, prior.lambda(), method, tol, max_iter)?;
    let estimate = PosteriorEstimate {
        mean,
        var_diag,
        lambda: prior.lambda(),
    };
    Ok((estimate, rep_mean.merge(rep_var)))
}

/// Per-sample posterior fusing an observation `g_T` and a noisy label `f_T`.
///
/// Minimizes `‖g_T − Hf‖²/(2v_ε) + ‖f_T − f‖²/(2v_fT) + ‖f − f̄‖²/(2v₀)` where
/// `v_ε`, `v₀`, `f̄` come from `prior`. The normal equations
/// `((1/v_ε)H'H + (1/v_fT + 1/v₀)I) f̂ = (1/v_ε)H'g_T + f_T/v_fT + f̄/v₀`
/// reduce to the unsupervised form with an effective prior variance
/// `1/(1/v_fT + 1/v₀)` and mean `(f_T/v_fT + f̄/v₀)/(1/v_fT + 1/v₀)`.
pub fn supervised_posterior(
    op: &dyn LinearOperator,
    g_t: &ImageGrid,
    f_t: &ImageGrid,
    v_ft: f64,
    prior: &NoisePrior,
    tol: f64,
    max_iter: usize,
    method: VarianceMethod,
) -> Result<(PosteriorEstimate, CgReport)> {
    if !(v_ft > 0.0) {
        return Err(invalid(format!("v_fT must be positive, got {v_ft}")));
    }
    if f_t.shape() != op.input_shape() {
        return Err(invalid("label shape does not match operator input"));
    }
    let precision = 1.0 / v_ft + 1.0 / prior.v_f;
    let fused_mean = f_t.zip_map(&prior.f_bar, |ft, fb| {
        (ft / v_ft + fb / prior.v_f) / precision
    });
    let fused = NoisePrior::new(prior.v_eps, 1.0 / precision, fused_mean)?;
    posterior(op, g_t, &fused, tol, max_iter, method)
}
