//! Mini-batch training for the supervised and unsupervised criteria.
//!
//! Seeds derived from `TrainConfig::seed`:
//! initial weights `split_seed(seed, 0)`; the train/validation split uses `seed`
//! itself; epoch `e` shuffles with `stream_rng(split_seed(seed, 2), e)`; the
//! dropout seed of optimizer step `t` is `split_seed(split_seed(seed, 3), t)`.
//!
//! Each step descends the batch-mean loss, i.e. the summed criterion divided by
//! the batch size.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::forward_ops::LinearOperator;
use crate::grid::ImageGrid;
use crate::losses::{loss_supervised, loss_unsupervised, LossBreakdown, LossWeights};
use crate::neural_net::{forward, init_params, EvalMode, NetworkParams, NetworkSpec};
use crate::rng::{split_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub split_fraction: f64,
    /// Abort when an epoch's mean loss exceeds this multiple of the first epoch's.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Supervised,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            loss_weights: LossWeights::default(),
            seed: 0,
            split_fraction: 0.8,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(invalid("split_fraction must lie in (0, 1)"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(invalid("divergence_factor must exceed 1"));
        }
        self.loss_weights.validate()
    }
}

/// Deterministic-mode metrics on the held-out split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationMetrics {
    /// Mean per-pixel squared error against the labels, when present.
    pub mse: Option<f64>,
    /// Mean over samples of `‖g − H f_NN‖²`.
    pub physics_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-sample mean of the training criterion over the epoch.
    pub train: LossBreakdown,
    pub validation: Option<ValidationMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const TSV_HEADER: &'static str = "epoch\ttotal\tj_nn\tj_physics_data\tj_physics_prior\tj_weight_prior\tphysics_residual\tval_mse\tval_physics_residual";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One tab-separated row per epoch under [`Self::TSV_HEADER`]; missing
    /// validation values are written as `NaN`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let t = &r.train;
            let (vm, vp) = match r.validation {
                Some(v) => (v.mse.unwrap_or(f64::NAN), v.physics_residual),
                None => (f64::NAN, f64::NAN),
            };
            let _ = writeln!(
                out,
                "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
                r.epoch,
                t.total,
                t.j_nn,
                t.j_physics_data,
                t.j_physics_prior,
                t.j_weight_prior,
                t.physics_residual,
                vm,
                vp
            );
        }
        out
    }
}

/// Seeded shuffle, then a cut at `round(fraction · N)`.
pub fn split_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(invalid("cannot split an empty dataset"));
    }
    let n = ds.len();
    let cut = (fraction * n as f64).round() as usize;
    if cut == 0 || cut == n {
        return Err(invalid(format!(
            "split of {n} samples at {fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    Ok((ds.subset(&idx[..cut]), ds.subset(&idx[cut..])))
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }
}

/// One update. SGD: `w ← w − lr·g`. Adam: bias-corrected moment estimates with
/// decay rates 0.9 / 0.999 and epsilon 1e-8.
///
/// The parameters are left untouched when the update would be non-finite.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut NetworkParams,
    grads: &NetworkParams,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(invalid("gradient length does not match parameters"));
    }
    let g = grads.as_slice();
    let update: Vec<f64> = match state {
        OptimizerState::Sgd => g.iter().map(|gi| -lr * gi).collect(),
        OptimizerState::Adam { m, v, t } => {
            if m.len() != g.len() {
                return Err(invalid("optimizer state does not match parameters"));
            }
            *t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
            (0..g.len())
                .map(|i| {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    -lr * mh / (vh.sqrt() + ADAM_EPS)
                })
                .collect()
        }
    };
    if let Some(i) = update.iter().position(|u| !u.is_finite()) {
        return Err(Error::NumericFailure {
            context: "optimizer",
            index: i,
        });
    }
    for (w, u) in params.as_mut_slice().iter_mut().zip(update) {
        *w += u;
    }
    Ok(())
}

fn check_mode(config: &TrainConfig, ds: &Dataset) -> Result<()> {
    if config.mode == TrainMode::Supervised && !ds.is_supervised() {
        return Err(invalid("supervised training needs a labelled dataset"));
    }
    if config.mode == TrainMode::Unsupervised && ds.is_supervised() {
        return Err(invalid(
            "unsupervised training expects an unlabelled dataset",
        ));
    }
    Ok(())
}

/// Deterministic forward metrics over `ds`.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &NetworkParams,
    ds: &Dataset,
    op: &dyn LinearOperator,
) -> Result<ValidationMetrics> {
    let mut sq = 0.0;
    let mut pixels = 0usize;
    let mut phys = 0.0;
    let mut labelled = false;
    for s in &ds.samples {
        let f_nn = predict(spec, params, &s.g)?;
        let r = op.apply(&f_nn)?.sub(&s.g);
        phys += r.dot(&r);
        if let Some(f) = &s.f {
            labelled = true;
            sq += f_nn.mse(f) * f.len() as f64;
            pixels += f.len();
        }
    }
    Ok(ValidationMetrics {
        mse: labelled.then(|| sq / pixels as f64),
        physics_residual: phys / ds.len().max(1) as f64,
    })
}

fn predict(spec: &NetworkSpec, params: &NetworkParams, g: &ImageGrid) -> Result<ImageGrid> {
    let input = spec.prepare_input(g)?;
    Ok(forward(spec, params, &input, EvalMode::Deterministic)?.0)
}

/// Splits `ds` with `config.split_fraction`, then trains on the first part from
/// freshly initialized weights, validating on the second after every epoch.
pub fn train(
    spec: &NetworkSpec,
    config: &TrainConfig,
    ds: &Dataset,
    op: &dyn LinearOperator,
    f_bar: &ImageGrid,
) -> Result<(NetworkParams, TrainHistory)> {
    config.validate()?;
    check_mode(config, ds)?;
    let (train_set, val_set) = split_dataset(ds, config.split_fraction, config.seed)?;
    let init = init_params(spec, split_seed(config.seed, 0))?;
    train_from(spec, config, init, &train_set, Some(&val_set), op, f_bar)
}

/// Training loop from given initial parameters on a pre-split training set.
pub fn train_from(
    spec: &NetworkSpec,
    config: &TrainConfig,
    mut params: NetworkParams,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    op: &dyn LinearOperator,
    f_bar: &ImageGrid,
) -> Result<(NetworkParams, TrainHistory)> {
    config.validate()?;
    check_mode(config, train_set)?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut history = TrainHistory::default();
    let mut state = OptimizerState::new(config.optimizer, params.len());
    let shuffle_seed = split_seed(config.seed, 2);
    let dropout_seed = split_seed(config.seed, 3);
    let n = train_set.len();
    let mut step: u64 = 0;
    let mut initial_loss = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(shuffle_seed, epoch as u64));
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let seed = split_seed(dropout_seed, step);
            let (loss, mut grads) = match config.mode {
                TrainMode::Supervised => {
                    let pairs: Vec<(&ImageGrid, &ImageGrid)> = batch
                        .iter()
                        .map(|&i| {
                            let s = &train_set.samples[i];
                            (&s.g, s.f.as_ref().expect("mode checked"))
                        })
                        .collect();
                    loss_supervised(spec, &params, &pairs, op, f_bar, &config.loss_weights, seed)?
                }
                TrainMode::Unsupervised => {
                    let gs: Vec<&ImageGrid> =
                        batch.iter().map(|&i| &train_set.samples[i].g).collect();
                    loss_unsupervised(spec, &params, &gs, op, &config.loss_weights, seed)?
                }
            };
            sum.accumulate(&loss);
            grads.scale(1.0 / batch.len() as f64);
            optimizer_step(&mut state, &mut params, &grads, config.learning_rate)?;
            step += 1;
        }
        let mean = sum.scaled(1.0 / n as f64);
        let initial = *initial_loss.get_or_insert(mean.total);
        if mean.total > config.divergence_factor * initial || !mean.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: mean.total,
                initial,
                factor: config.divergence_factor,
            });
        }
        let validation = match validation {
            Some(v) if !v.is_empty() => Some(evaluate(spec, &params, v, op)?),
            _ => None,
        };
        history.records.push(EpochRecord {
            epoch,
            train: mean,
            validation,
        });
    }
    Ok((params, history))
}
