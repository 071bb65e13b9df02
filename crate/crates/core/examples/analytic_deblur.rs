//! Closed-form Gaussian posterior for a blurred, noisy scene: mean by conjugate
//! gradients on (H'H + λI) f = H'g + λ f̄, per-pixel variance two ways.
//!
//! Usage: `cargo run --release --example analytic_deblur [out_dir]`

use std::path::PathBuf;

use bpinn::analytic_bayes::{posterior_mean, posterior_variance_diag, NoisePrior, VarianceMethod};
use bpinn::datagen::{generate_source_image, simulate_observation, SceneConfig};
use bpinn::forward_ops::{Convolution, PsfKernel};
use bpinn::image_io::{write_image, ImageFormat};
use bpinn::metrics::compute_metrics;

fn main() -> bpinn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bpinn-analytic"));
    std::fs::create_dir_all(&out)?;

    let scene = SceneConfig {
        size: (48, 48),
        ..Default::default()
    };
    let f = generate_source_image(&scene, 11)?;
    let op = Convolution::new(f.shape(), PsfKernel::gaussian(9, 2.0)?)?;
    let v_eps = 1e-4;
    let g = simulate_observation(&f, &op, v_eps, 12)?;

    let prior = NoisePrior::centered(v_eps, 0.1, f.shape())?;
    let (mean, rep) = posterior_mean(&op, &g, &prior, 1e-10, 2000)?;
    println!(
        "lambda {:.1e}, cg {} iterations, converged {}",
        prior.lambda(),
        rep.iterations,
        rep.converged
    );
    println!(
        "blurred input  mse {:.3e}",
        compute_metrics(&g, &f, 1.0)?.mse
    );
    println!(
        "posterior mean mse {:.3e}",
        compute_metrics(&mean, &f, 1.0)?.mse
    );

    let (exact, _) = posterior_variance_diag(&op, &prior, VarianceMethod::Dense)?;
    let (approx, _) = posterior_variance_diag(
        &op,
        &prior,
        VarianceMethod::Hutchinson {
            probes: 300,
            seed: 1,
        },
    )?;
    let worst = exact
        .values()
        .iter()
        .zip(approx.values())
        .map(|(a, b)| ((a - b) / a).abs())
        .fold(0.0, f64::max);
    println!(
        "variance: mean {:.3e}, Hutchinson (300 probes) worst relative error {worst:.3}",
        exact.mean()
    );

    for (name, img) in [
        ("truth", &f),
        ("observed", &g),
        ("mean", &mean),
        ("variance", &exact),
    ] {
        write_image(img, out.join(format!("{name}.pgm")), ImageFormat::Pgm16)?;
    }
    println!("images in {}", out.display());
    Ok(())
}
