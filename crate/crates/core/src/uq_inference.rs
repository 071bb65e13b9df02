//! MC-dropout predictive moments and comparison with the analytic posterior.
//!
//! Pass `t` of a run with seed `s` uses dropout seed `split_seed(s, t)`. Passes
//! are evaluated in parallel chunks and folded into the running moments in pass
//! order, so the result does not depend on the thread count.

use rayon::prelude::*;

use crate::analytic_bayes::PosteriorEstimate;
use crate::error::{invalid, Result};
use crate::grid::ImageGrid;
use crate::neural_net::{forward, EvalMode, NetworkParams, NetworkSpec};
use crate::rng::split_seed;

pub const DEFAULT_PASSES: usize = 50;

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct UqResult {
    pub mean: ImageGrid,
    /// Unbiased per-pixel sample variance (divisor `T − 1`).
    pub var_diag: ImageGrid,
    pub passes: usize,
    pub seed: u64,
    /// Set when no dropout layer has a positive rate; the variance is then zero.
    pub degenerate: bool,
}

/// `T` stochastic passes with per-pass seeds `split_seed(seed, t)`.
pub fn mc_dropout_predict(
    spec: &NetworkSpec,
    params: &NetworkParams,
    g: &ImageGrid,
    passes: usize,
    seed: u64,
) -> Result<UqResult> {
    let seeds: Vec<u64> = (0..passes as u64).map(|t| split_seed(seed, t)).collect();
    let mut r = mc_dropout_from_seeds(spec, params, g, &seeds)?;
    r.seed = seed;
    Ok(r)
}

/// Same as [`mc_dropout_predict`] with explicit per-pass dropout seeds.
/// The returned `seed` field is 0.
pub fn mc_dropout_from_seeds(
    spec: &NetworkSpec,
    params: &NetworkParams,
    g: &ImageGrid,
    seeds: &[u64],
) -> Result<UqResult> {
    let passes = seeds.len();
    if passes < 2 {
        return Err(invalid(format!(
            "MC dropout needs at least 2 passes, got {passes}"
        )));
    }
    let input = spec.prepare_input(g)?;
    let (oh, ow) = spec.output_shape;
    let n = oh * ow;
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut count = 0usize;
    for chunk in seeds.chunks(CHUNK) {
        let outs: Vec<ImageGrid> = chunk
            .par_iter()
            .map(|&s| {
                forward(spec, params, &input, EvalMode::Stochastic { seed: s }).map(|(o, _)| o)
            })
            .collect::<Result<_>>()?;
        for out in outs {
            count += 1;
            let k = count as f64;
            for ((m, q), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(out.values()) {
                let d = x - *m;
                *m += d / k;
                *q += d * (x - *m);
            }
        }
    }
    let denom = (passes - 1) as f64;
    let var: Vec<f64> = m2.into_iter().map(|q| (q / denom).max(0.0)).collect();
    Ok(UqResult {
        mean: ImageGrid::from_parts(oh, ow, mean),
        var_diag: ImageGrid::from_parts(oh, ow, var),
        passes,
        seed: 0,
        degenerate: !spec.has_active_dropout(),
    })
}

/// Deterministic forward pass.
pub fn point_estimate(
    spec: &NetworkSpec,
    params: &NetworkParams,
    g: &ImageGrid,
) -> Result<ImageGrid> {
    let input = spec.prepare_input(g)?;
    Ok(forward(spec, params, &input, EvalMode::Deterministic)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonReport {
    pub mse_mean_vs_analytic: f64,
    pub mse_mean_vs_truth: Option<f64>,
    /// Pearson correlation of the two variance maps; `None` when either is constant.
    pub variance_correlation: Option<f64>,
}

pub fn compare_with_analytic(
    uq: &UqResult,
    analytic: &PosteriorEstimate,
    truth: Option<&ImageGrid>,
) -> Result<ComparisonReport> {
    let shape = uq.mean.shape();
    if analytic.mean.shape() != shape
        || analytic.var_diag.shape() != shape
        || uq.var_diag.shape() != shape
    {
        return Err(invalid("UQ and analytic estimates differ in shape"));
    }
    if let Some(t) = truth {
        if t.shape() != shape {
            return Err(invalid("ground truth shape differs from estimate"));
        }
    }
    Ok(ComparisonReport {
        mse_mean_vs_analytic: uq.mean.mse(&analytic.mean),
        mse_mean_vs_truth: truth.map(|t| uq.mean.mse(t)),
        variance_correlation: pearson(uq.var_diag.values(), analytic.var_diag.values()),
    })
}

/// Pearson correlation, `None` for a zero-variance input.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
