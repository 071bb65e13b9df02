//! Command-line front end. The `bpinn` binary is a thin wrapper over [`main_with_args`].
//!
//! Exit codes: 0 success, 1 check failure (including non-converged CG),
//! 2 configuration or argument error, 3 I/O error (including unreadable dataset
//! or image files), 4 divergence or non-finite training state, 5 corrupted
//! checkpoint.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::analytic_bayes::{posterior_mean, posterior_variance_diag, NoisePrior};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::checks::{adjoint_suite, gradient_suite, CheckOutcome};
use crate::config::RunConfig;
use crate::datagen::{generate_dataset, generate_source_image, load_dataset, save_dataset};
use crate::rng::split_seed;
use crate::error::Error;
use crate::grid::ImageGrid;
use crate::image_io::{read_image, write_image, ImageFormat};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::neural_net::NetworkSpec;
use crate::trainer::train;
use crate::uq_inference::{mc_dropout_predict, DEFAULT_PASSES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "bpinn",
    version,
    about = "Bayesian physics-informed networks for deblurring and super-resolution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    Adjoint,
    Grad,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override `paths.dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the first N samples as images into `paths.output_dir`.
        #[arg(long, default_value_t = 0)]
        export_samples: usize,
    },
    /// Train a network; writes a checkpoint and a TSV history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Override `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override `paths.history`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// MC-dropout mean and variance images for one observation.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PASSES)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "mean.bpim")]
        out_mean: PathBuf,
        #[arg(long, default_value = "var.bpim")]
        out_var: PathBuf,
        /// Ground truth; prints metrics of the mean image when given.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Closed-form Gaussian posterior mean and variance for one observation.
    AnalyticSolve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "analytic_mean.bpim")]
        out_mean: PathBuf,
        #[arg(long, default_value = "analytic_var.bpim")]
        out_var: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the adjoint and gradient checks.
    Check {
        #[arg(value_enum, default_value_t = CheckKind::All)]
        what: CheckKind,
        /// Replace the convolution adjoint with a deliberately wrong one.
        #[arg(long, hide = true)]
        mutate_adjoint: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MSE, PSNR and squared-error sum of an estimate against the truth.
    Metrics {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Option<Error>,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::Config { .. } => EXIT_CONFIG,
            Error::Io(_) | Error::Format(_) => EXIT_IO,
            Error::Divergence { .. } | Error::NumericFailure { .. } => EXIT_DIVERGENCE,
        };
        CliError {
            code,
            message: e.to_string(),
            error: Some(e),
        }
    }
}

impl CliError {
    fn check(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CHECK,
            error: None,
            message: message.into(),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io(io) => CliError {
            code: EXIT_CONFIG,
            message: format!("cannot read config {}: {io}", path.display()),
            error: Some(Error::Io(io)),
        },
        other => other.into(),
    })
}

fn load_model(path: &Path) -> Result<(NetworkSpec, crate::neural_net::NetworkParams), CliError> {
    load_checkpoint(path).map_err(|e| {
        let code = match e {
            Error::Format(_) => EXIT_CHECKPOINT,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: format!("checkpoint {}: {e}", path.display()),
            error: Some(e),
        }
    })
}

fn read_input(path: &Path) -> Result<ImageGrid, CliError> {
    read_image(path).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn write_out(img: &ImageGrid, path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_image(img, path, ImageFormat::from_path(path))
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: mse {:.6e}  psnr {:.3} dB  delta {:.6e}",
        m.mse, m.psnr, m.delta
    );
}

pub fn cmd_gen_data(config: &Path, out: Option<&Path>, export_samples: usize) -> CliResult {
    let cfg = load_config(config)?;
    let spec = cfg.dataset_spec()?;
    let ds = generate_dataset(&spec)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.dataset.clone());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    save_dataset(&ds, &path)?;
    // truth images are regenerated, so they exist for unlabelled datasets too
    for (i, s) in ds.samples.iter().take(export_samples).enumerate() {
        write_out(&s.g, &cfg.paths.output_dir.join(format!("g_{i:04}.bpim")))?;
        let f = match &s.f {
            Some(f) => f.clone(),
            None => generate_source_image(&spec.scene, split_seed(split_seed(spec.seed, i as u64), 0))?,
        };
        write_out(&f, &cfg.paths.output_dir.join(format!("f_{i:04}.bpim")))?;
    }
    let (h, w) = ds.source_shape;
    let (oh, ow) = ds.observation_shape();
    println!(
        "wrote {}: {} {} samples, task {:?}, source {h}x{w}, observation {oh}x{ow}, seed {}",
        path.display(),
        ds.len(),
        if ds.is_supervised() {
            "labelled"
        } else {
            "unlabelled"
        },
        ds.task,
        ds.generator_seed
    );
    Ok(())
}

pub fn cmd_train(
    config: &Path,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
    history: Option<&Path>,
) -> CliResult {
    let cfg = load_config(config)?;
    let ds_path = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.dataset.clone());
    let ds = load_dataset(&ds_path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("dataset {}: {e}", ds_path.display()),
        error: Some(e),
    })?;
    let tc = cfg.train_config(ds.is_supervised());
    if (tc.mode == crate::trainer::TrainMode::Supervised) != ds.is_supervised() {
        return Err(Error::Config {
            key: "train.mode".into(),
            message: format!(
                "{:?} training does not match a {} dataset",
                tc.mode,
                if ds.is_supervised() {
                    "labelled"
                } else {
                    "unlabelled"
                }
            ),
        }
        .into());
    }
    let spec = NetworkSpec::encoder_decoder(ds.source_shape, &cfg.architecture())?;
    let op = ds.forward_operator()?;
    let f_bar = ImageGrid::filled(ds.source_shape.0, ds.source_shape.1, cfg.loss.f_bar);
    let (params, hist) = train(&spec, &tc, &ds, op.as_ref(), &f_bar)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let hpath = history
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.history.clone());
    for p in [&ckpt, &hpath] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
        }
    }
    save_checkpoint(&spec, &params, &ckpt)?;
    std::fs::write(&hpath, hist.to_tsv()).map_err(Error::from)?;
    match hist.records.last() {
        Some(r) => {
            println!(
                "epoch {}: loss {:.6e}  j_nn {:.6e}  physics {:.6e}  residual {:.6e}",
                r.epoch,
                r.train.total,
                r.train.j_nn,
                r.train.j_physics_data,
                r.train.physics_residual
            );
            if let Some(v) = r.validation {
                match v.mse {
                    Some(m) => println!(
                        "validation: mse {m:.6e}  residual {:.6e}",
                        v.physics_residual
                    ),
                    None => println!("validation: residual {:.6e}", v.physics_residual),
                }
            }
        }
        None => println!("0 epochs: checkpoint holds the initialization"),
    }
    println!("wrote {} and {}", ckpt.display(), hpath.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    passes: usize,
    seed: u64,
    out_mean: &Path,
    out_var: &Path,
    truth: Option<&Path>,
    peak: f64,
) -> CliResult {
    if passes < 2 {
        return Err(
            Error::InvalidArgument(format!("--passes must be at least 2, got {passes}")).into(),
        );
    }
    let (spec, params) = load_model(checkpoint)?;
    let g = read_input(input)?;
    let uq = mc_dropout_predict(&spec, &params, &g, passes, seed)?;
    if uq.degenerate {
        eprintln!("warning: network has no active dropout; variance is identically zero");
    }
    write_out(&uq.mean, out_mean)?;
    write_out(&uq.var_diag, out_var)?;
    println!(
        "{} passes, seed {seed}: wrote {} and {} (mean variance {:.6e})",
        passes,
        out_mean.display(),
        out_var.display(),
        uq.var_diag.mean()
    );
    if let Some(t) = truth {
        let truth = read_input(t)?;
        print_metrics("mean vs truth", &compute_metrics(&uq.mean, &truth, peak)?);
    }
    Ok(())
}

pub fn cmd_analytic(
    config: &Path,
    input: &Path,
    out_mean: &Path,
    out_var: &Path,
    truth: Option<&Path>,
) -> CliResult {
    let cfg = load_config(config)?;
    let g = read_input(input)?;
    let op = crate::datagen::forward_operator(
        cfg.task(),
        cfg.source_shape(),
        &cfg.psf()?,
        cfg.operator.downsample_factor,
    )?;
    if g.shape() != op.output_shape() {
        return Err(Error::InvalidArgument(format!(
            "input is {:?} but the configured operator observes {:?}",
            g.shape(),
            op.output_shape()
        ))
        .into());
    }
    let a = &cfg.analytic;
    let (h, w) = op.input_shape();
    let prior = NoisePrior::new(a.v_eps, a.v_f, ImageGrid::filled(h, w, a.f_bar))?;
    let (mean, rep) = posterior_mean(op.as_ref(), &g, &prior, a.cg_tol, a.cg_max_iter)?;
    println!(
        "lambda {:.6e}: cg {} iterations, relative residual {:.3e}, converged {}",
        prior.lambda(),
        rep.iterations,
        rep.final_residual_norm,
        rep.converged
    );
    write_out(&mean, out_mean)?;
    if let Some(method) = cfg.variance_method() {
        let (var, vrep) = posterior_variance_diag(op.as_ref(), &prior, method)?;
        write_out(&var, out_var)?;
        println!(
            "variance ({:?}): wrote {} (cg worst residual {:.3e})",
            method,
            out_var.display(),
            vrep.final_residual_norm
        );
    }
    println!("wrote {}", out_mean.display());
    if let Some(t) = truth {
        let truth = read_input(t)?;
        print_metrics(
            "mean vs truth",
            &compute_metrics(&mean, &truth, cfg.metrics.peak)?,
        );
    }
    if !rep.converged {
        return Err(CliError::check(format!(
            "conjugate gradients did not converge: relative residual {:.3e} after {} iterations",
            rep.final_residual_norm, rep.iterations
        )));
    }
    Ok(())
}

fn report(outcomes: &[CheckOutcome]) -> bool {
    let mut ok = true;
    for c in outcomes {
        println!(
            "{} {}: max residual {:.3e} (tolerance {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.residual,
            c.tolerance
        );
        ok &= c.passed();
    }
    ok
}

pub fn cmd_check(what: CheckKind, mutate_adjoint: bool, seed: u64) -> CliResult {
    let mut ok = true;
    if matches!(what, CheckKind::Adjoint | CheckKind::All) {
        ok &= report(&adjoint_suite(mutate_adjoint, seed)?);
    }
    if matches!(what, CheckKind::Grad | CheckKind::All) {
        ok &= report(&gradient_suite(seed)?);
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::check("one or more checks failed"))
    }
}

pub fn cmd_metrics(estimate: &Path, truth: &Path, peak: f64) -> CliResult {
    let est = read_input(estimate)?;
    let t = read_input(truth)?;
    print_metrics("metrics", &compute_metrics(&est, &t, peak)?);
    Ok(())
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData {
            config,
            out,
            export_samples,
        } => cmd_gen_data(&config, out.as_deref(), export_samples),
        Command::Train {
            config,
            dataset,
            checkpoint,
            history,
        } => cmd_train(
            &config,
            dataset.as_deref(),
            checkpoint.as_deref(),
            history.as_deref(),
        ),
        Command::Infer {
            checkpoint,
            input,
            passes,
            seed,
            out_mean,
            out_var,
            truth,
            peak,
        } => cmd_infer(
            &checkpoint,
            &input,
            passes,
            seed,
            &out_mean,
            &out_var,
            truth.as_deref(),
            peak,
        ),
        Command::AnalyticSolve {
            config,
            input,
            out_mean,
            out_var,
            truth,
        } => cmd_analytic(&config, &input, &out_mean, &out_var, truth.as_deref()),
        Command::Check {
            what,
            mutate_adjoint,
            seed,
        } => cmd_check(what, mutate_adjoint, seed),
        Command::Metrics {
            estimate,
            truth,
            peak,
        } => cmd_metrics(&estimate, &truth, peak),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
