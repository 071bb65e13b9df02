//! Uncertainty from Monte Carlo dropout: T stochastic passes give a mean and a
//! per-pixel variance map, set next to the analytic posterior variance.

use bpinn::analytic_bayes::{posterior, NoisePrior, VarianceMethod};
use bpinn::datagen::{generate_dataset, DatasetSpec, SceneConfig, Task};
use bpinn::forward_ops::PsfKernel;
use bpinn::neural_net::{Architecture, NetworkSpec};
use bpinn::trainer::{train, TrainConfig};
use bpinn::uq_inference::{compare_with_analytic, mc_dropout_predict};
use bpinn::ImageGrid;

fn main() -> bpinn::Result<()> {
    let ds = generate_dataset(&DatasetSpec {
        scene: SceneConfig {
            size: (16, 16),
            ..Default::default()
        },
        task: Task::Deblur,
        psf: PsfKernel::gaussian(5, 1.5)?,
        downsample_factor: 1,
        noise_variance: 1e-4,
        count: 60,
        supervised: true,
        seed: 21,
    })?;
    let arch = Architecture {
        dropout_rate: 0.2,
        ..Default::default()
    };
    let spec = NetworkSpec::encoder_decoder((16, 16), &arch)?;
    let op = ds.forward_operator()?;
    let cfg = TrainConfig {
        epochs: 120,
        seed: 21,
        ..Default::default()
    };
    let (params, _) = train(&spec, &cfg, &ds, op.as_ref(), &ImageGrid::zeros(16, 16))?;

    let sample = &ds.samples[0];
    let truth = sample.f.as_ref().unwrap();
    let prior = NoisePrior::centered(1e-4, 0.1, (16, 16))?;
    let (analytic, _) = posterior(
        op.as_ref(),
        &sample.g,
        &prior,
        1e-10,
        2000,
        VarianceMethod::Dense,
    )?;
    for passes in [10, 50, 200] {
        let uq = mc_dropout_predict(&spec, &params, &sample.g, passes, 5)?;
        let r = compare_with_analytic(&uq, &analytic, Some(truth))?;
        println!(
            "T = {passes:>3}: mse vs truth {:.3e}, mean variance {:.3e}, variance correlation with analytic {}",
            r.mse_mean_vs_truth.unwrap(),
            uq.var_diag.mean(),
            r.variance_correlation.map_or("n/a".into(), |c| format!("{c:.3}")),
        );
    }
    println!(
        "analytic: mse vs truth {:.3e}, mean variance {:.3e}",
        analytic.mean.mse(truth),
        analytic.var_diag.mean()
    );
    Ok(())
}
