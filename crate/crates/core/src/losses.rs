//! Training criteria for the network surrogate.
//!
//! Supervised, summed over the batch:
//!
//! ```text
//! J(w) = Σᵢ ‖f_Tᵢ − f_NNᵢ‖²/v_f + ‖g_Tᵢ − H f_NNᵢ‖²/v_ε + ‖f̄ − f_NNᵢ‖²/v_prior + γ_w ‖w‖_β^β
//! ```
//!
//! Unsupervised: `J(w) = Σᵢ ‖g_Tᵢ − H f_NNᵢ‖²/v_ε + γ_w ‖w‖₁`.
//!
//! An infinite variance switches its term off.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::forward_ops::LinearOperator;
use crate::grid::{self, ImageGrid};
use crate::neural_net::{backward, forward, EvalMode, NetworkParams, NetworkSpec};
use crate::rng::split_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Label-fidelity variance.
    pub v_f: f64,
    /// Physics-residual variance.
    pub v_eps: f64,
    /// Output-prior variance.
    pub v_prior: f64,
    pub gamma_w: f64,
    /// Weight-prior exponent, 1 or 2.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            v_f: 1.0,
            v_eps: 0.01,
            v_prior: f64::INFINITY,
            gamma_w: 0.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("v_f", self.v_f),
            ("v_eps", self.v_eps),
            ("v_prior", self.v_prior),
        ] {
            if !(v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma_w >= 0.0 && self.gamma_w.is_finite()) {
            return Err(invalid(format!(
                "gamma_w must be non-negative, got {}",
                self.gamma_w
            )));
        }
        check_beta(self.beta)
    }

    /// Label term only: physics, output prior and weight prior switched off.
    pub fn labels_only(v_f: f64) -> Self {
        Self {
            v_f,
            v_eps: f64::INFINITY,
            v_prior: f64::INFINITY,
            gamma_w: 0.0,
            beta: 1.0,
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta != 1.0 && beta != 2.0 {
        return Err(invalid(format!(
            "weight-prior exponent must be 1 or 2, got {beta}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub j_nn: f64,
    pub j_physics_data: f64,
    pub j_physics_prior: f64,
    pub j_weight_prior: f64,
    /// Unweighted `Σᵢ ‖g_Tᵢ − H f_NNᵢ‖²`.
    pub physics_residual: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.j_nn + self.j_physics_data + self.j_physics_prior + self.j_weight_prior;
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            total: self.total * s,
            j_nn: self.j_nn * s,
            j_physics_data: self.j_physics_data * s,
            j_physics_prior: self.j_physics_prior * s,
            j_weight_prior: self.j_weight_prior * s,
            physics_residual: self.physics_residual * s,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.j_nn += other.j_nn;
        self.j_physics_data += other.j_physics_data;
        self.j_physics_prior += other.j_physics_prior;
        self.j_weight_prior += other.j_weight_prior;
        self.physics_residual += other.physics_residual;
    }
}

fn inv(v: f64) -> f64 {
    if v.is_infinite() {
        0.0
    } else {
        1.0 / v
    }
}

/// `γ_w Σⱼ |wⱼ|^β` and its (sub)gradient; the subgradient of `|w|` at 0 is 0.
pub fn weight_prior(
    params: &NetworkParams,
    gamma_w: f64,
    beta: f64,
) -> Result<(f64, NetworkParams)> {
    check_beta(beta)?;
    if !(gamma_w >= 0.0) {
        return Err(invalid("gamma_w must be non-negative"));
    }
    let mut grad = params.zeros_like();
    if gamma_w == 0.0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for (g, &w) in grad.as_mut_slice().iter_mut().zip(params.as_slice()) {
        if beta == 1.0 {
            value += w.abs();
            *g = if w > 0.0 {
                gamma_w
            } else if w < 0.0 {
                -gamma_w
            } else {
                0.0
            };
        } else {
            value += w * w;
            *g = 2.0 * gamma_w * w;
        }
    }
    Ok((gamma_w * value, grad))
}

struct SampleTerms {
    parts: LossBreakdown,
    grads: NetworkParams,
}

/// Per-sample residuals and their gradient, pushed back through the network.
fn sample_terms(
    spec: &NetworkSpec,
    params: &NetworkParams,
    op: &dyn LinearOperator,
    g_t: &ImageGrid,
    f_t: Option<&ImageGrid>,
    f_bar: Option<&ImageGrid>,
    weights: &LossWeights,
    seed: u64,
    index: usize,
) -> Result<SampleTerms> {
    if g_t.shape() != op.output_shape() {
        return Err(invalid(format!(
            "sample {index}: observation {:?} does not match operator output {:?}",
            g_t.shape(),
            op.output_shape()
        )));
    }
    let input = spec.prepare_input(g_t)?;
    let (f_nn, tape) = forward(spec, params, &input, EvalMode::Train { seed })?;
    if f_nn.shape() != op.input_shape() {
        return Err(invalid(format!(
            "network output {:?} does not match operator input {:?}",
            f_nn.shape(),
            op.input_shape()
        )));
    }
    let mut parts = LossBreakdown::default();
    let mut dloss = vec![0.0; f_nn.len()];

    let phys = op.apply_unchecked(&f_nn).sub(g_t);
    let phys_sq = phys.dot(&phys);
    parts.physics_residual = phys_sq;
    let w_eps = inv(weights.v_eps);
    if w_eps > 0.0 {
        parts.j_physics_data = w_eps * phys_sq;
        let back = op.adjoint_unchecked(&phys);
        for (d, b) in dloss.iter_mut().zip(back.values()) {
            *d += 2.0 * w_eps * b;
        }
    }
    if let Some(f_t) = f_t {
        if f_t.shape() != f_nn.shape() {
            return Err(invalid(format!("sample {index}: label shape mismatch")));
        }
        let w_f = inv(weights.v_f);
        if w_f > 0.0 {
            parts.j_nn = w_f * grid::squared_distance(f_nn.values(), f_t.values());
            for ((d, a), b) in dloss.iter_mut().zip(f_nn.values()).zip(f_t.values()) {
                *d += 2.0 * w_f * (a - b);
            }
        }
    }
    if let Some(f_bar) = f_bar {
        if f_bar.shape() != f_nn.shape() {
            return Err(invalid("prior mean shape mismatch"));
        }
        let w_p = inv(weights.v_prior);
        if w_p > 0.0 {
            parts.j_physics_prior = w_p * grid::squared_distance(f_nn.values(), f_bar.values());
            for ((d, a), b) in dloss.iter_mut().zip(f_nn.values()).zip(f_bar.values()) {
                *d += 2.0 * w_p * (a - b);
            }
        }
    }
    let parts = parts.finish();
    if !parts.total.is_finite() {
        return Err(Error::NumericFailure {
            context: "loss",
            index,
        });
    }
    let (oh, ow) = f_nn.shape();
    let (grads, _) = backward(spec, params, &tape, &ImageGrid::from_parts(oh, ow, dloss))?;
    Ok(SampleTerms { parts, grads })
}

fn reduce(
    terms: Vec<Result<SampleTerms>>,
    params: &NetworkParams,
    gamma_w: f64,
    beta: f64,
) -> Result<(LossBreakdown, NetworkParams)> {
    let mut total = LossBreakdown::default();
    let mut grads = params.zeros_like();
    for t in terms {
        let t = t?;
        total.accumulate(&t.parts);
        grads.add_scaled(&t.grads, 1.0);
    }
    let (wp, wgrad) = weight_prior(params, gamma_w, beta)?;
    total.j_weight_prior = wp;
    grads.add_scaled(&wgrad, 1.0);
    let total = total.finish();
    if !total.total.is_finite() {
        return Err(Error::NumericFailure {
            context: "loss",
            index: 0,
        });
    }
    Ok((total, grads))
}

/// Supervised criterion over `(g_T, f_T)` pairs. Sample `i` runs in train mode
/// with dropout seed `split_seed(seed, i)`; terms are reduced in index order.
pub fn loss_supervised(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[(&ImageGrid, &ImageGrid)],
    op: &dyn LinearOperator,
    f_bar: &ImageGrid,
    weights: &LossWeights,
    seed: u64,
) -> Result<(LossBreakdown, NetworkParams)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(invalid("batch must be nonempty"));
    }
    let terms: Vec<Result<SampleTerms>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (g, f))| {
            sample_terms(
                spec,
                params,
                op,
                g,
                Some(f),
                Some(f_bar),
                weights,
                split_seed(seed, i as u64),
                i,
            )
        })
        .collect();
    reduce(terms, params, weights.gamma_w, weights.beta)
}

/// Physics-only criterion over observations; the weight prior is always `‖w‖₁`.
pub fn loss_unsupervised(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[&ImageGrid],
    op: &dyn LinearOperator,
    weights: &LossWeights,
    seed: u64,
) -> Result<(LossBreakdown, NetworkParams)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(invalid("batch must be nonempty"));
    }
    let terms: Vec<Result<SampleTerms>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            sample_terms(
                spec,
                params,
                op,
                g,
                None,
                None,
                weights,
                split_seed(seed, i as u64),
                i,
            )
        })
        .collect();
    reduce(terms, params, weights.gamma_w, 1.0)
}
