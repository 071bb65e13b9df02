//! Standing numerical checks: adjoint dot-tests and finite-difference gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::forward_ops::{
    adjoint_dot_test, compose, Convolution, Downsample, Operator, PsfKernel,
    UnflippedAdjointConvolution,
};
use crate::grid::ImageGrid;
use crate::losses::{loss_supervised, loss_unsupervised, LossWeights};
use crate::neural_net::{init_params_with, Architecture, HeadInit, NetworkParams, NetworkSpec};
use crate::rng::stream_rng;

pub const ADJOINT_TOL: f64 = 1e-10;
pub const ADJOINT_TRIALS: usize = 100;
pub const GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

/// Gradient components below this fraction of the largest one are compared
/// against that floor rather than their own magnitude; central differences
/// cannot resolve them relatively.
pub const GRAD_FLOOR_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.residual <= self.tolerance
    }
}

/// A fixed asymmetric 5×5 kernel, so a missing flip in an adjoint shows up.
pub fn asymmetric_psf() -> PsfKernel {
    let raw: Vec<f64> = (0..25)
        .map(|i| 1.0 + i as f64 + 0.3 * ((i * 7) % 5) as f64)
        .collect();
    PsfKernel::normalized(5, raw).expect("positive weights")
}

/// Operators under test: convolution, downsampling and the super-resolution
/// composition. `mutate` swaps in a convolution whose adjoint skips the flip.
pub fn adjoint_operators(mutate: bool) -> Result<Vec<(String, Operator)>> {
    let psf = asymmetric_psf();
    let conv: Operator = if mutate {
        std::sync::Arc::new(UnflippedAdjointConvolution(Convolution::new(
            (13, 11),
            psf.clone(),
        )?))
    } else {
        Convolution::shared((13, 11), psf.clone())?
    };
    let down = Downsample::shared((12, 18), 3)?;
    let d2 = Downsample::shared((24, 20), 2)?;
    let h2 = Convolution::shared(d2.output_shape(), psf)?;
    Ok(vec![
        ("convolution 13x11, 5x5 asymmetric psf".into(), conv),
        ("downsample 12x18 by 3".into(), down),
        (
            "convolution after downsample 24x20 by 2".into(),
            compose(h2, d2)?,
        ),
    ])
}

pub fn adjoint_suite(mutate: bool, seed: u64) -> Result<Vec<CheckOutcome>> {
    adjoint_operators(mutate)?
        .into_iter()
        .map(|(name, op)| {
            Ok(CheckOutcome {
                name,
                residual: adjoint_dot_test(op.as_ref(), ADJOINT_TRIALS, seed)?,
                tolerance: ADJOINT_TOL,
            })
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at every parameter; returns the worst
/// [`relative_error`] against `grad`, with the floor at
/// [`GRAD_FLOOR_FRACTION`] of the largest analytic component.
pub fn fd_max_relative_error(
    params: &NetworkParams,
    grad: &NetworkParams,
    h: f64,
    mut f: impl FnMut(&NetworkParams) -> Result<f64>,
) -> Result<f64> {
    let floor = GRAD_FLOOR_FRACTION * grad.as_slice().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for j in 0..params.len() {
        let w = params.as_slice()[j];
        p.as_mut_slice()[j] = w + h;
        let up = f(&p)?;
        p.as_mut_slice()[j] = w - h;
        let down = f(&p)?;
        p.as_mut_slice()[j] = w;
        worst = worst.max(relative_error(
            grad.as_slice()[j],
            (up - down) / (2.0 * h),
            floor,
        ));
    }
    Ok(worst)
}

/// Seeded 6×6 network (under 500 parameters) with active dropout and biases
/// jittered away from zero.
pub fn grad_check_net(seed: u64) -> Result<(NetworkSpec, NetworkParams)> {
    let arch = Architecture {
        hidden_channels: vec![2, 3, 2],
        kernel_size: 3,
        dropout_rate: 0.2,
        dropout_after: vec![2],
    };
    let spec = NetworkSpec::encoder_decoder((6, 6), &arch)?;
    let mut params = init_params_with(&spec, seed, HeadInit::He)?;
    let mut rng = stream_rng(seed, 1000);
    for i in 0..params.layer_count() {
        for b in params.bias_mut(i) {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((spec, params))
}

fn seeded_image(shape: (usize, usize), seed: u64, stream: u64) -> ImageGrid {
    let mut rng = stream_rng(seed, stream);
    ImageGrid::from_fn(shape.0, shape.1, |_, _| rng.random::<f64>())
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (spec, params) = grad_check_net(seed)?;
    let op = Convolution::new((6, 6), PsfKernel::gaussian(3, 0.8)?)?;
    let gs: Vec<ImageGrid> = (0..2)
        .map(|i| seeded_image((6, 6), seed, 2000 + i))
        .collect();
    let fs: Vec<ImageGrid> = (0..2)
        .map(|i| seeded_image((6, 6), seed, 3000 + i))
        .collect();
    let f_bar = ImageGrid::filled(6, 6, 0.3);
    let pairs: Vec<(&ImageGrid, &ImageGrid)> = gs.iter().zip(&fs).collect();
    let g_refs: Vec<&ImageGrid> = gs.iter().collect();
    let dropout_seed = seed ^ 0x5eed;

    let mut out = Vec::new();
    for beta in [1.0, 2.0] {
        let weights = LossWeights {
            v_f: 0.5,
            v_eps: 0.05,
            v_prior: 4.0,
            gamma_w: 1e-2,
            beta,
        };
        let (_, grad) =
            loss_supervised(&spec, &params, &pairs, &op, &f_bar, &weights, dropout_seed)?;
        let err = fd_max_relative_error(&params, &grad, FD_STEP, |p| {
            Ok(
                loss_supervised(&spec, p, &pairs, &op, &f_bar, &weights, dropout_seed)?
                    .0
                    .total,
            )
        })?;
        out.push(CheckOutcome {
            name: format!("supervised loss, {} params, beta {beta}", params.len()),
            residual: err,
            tolerance: GRAD_TOL,
        });
    }
    let weights = LossWeights {
        v_eps: 0.05,
        gamma_w: 1e-2,
        ..Default::default()
    };
    let (_, grad) = loss_unsupervised(&spec, &params, &g_refs, &op, &weights, dropout_seed)?;
    let err = fd_max_relative_error(&params, &grad, FD_STEP, |p| {
        Ok(
            loss_unsupervised(&spec, p, &g_refs, &op, &weights, dropout_seed)?
                .0
                .total,
        )
    })?;
    out.push(CheckOutcome {
        name: format!("unsupervised loss, {} params", params.len()),
        residual: err,
        tolerance: GRAD_TOL,
    });
    Ok(out)
}
