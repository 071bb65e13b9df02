//! Super-resolution: 32x32 scenes seen through a block average by 2 and a blur
//! on the 16x16 grid. Compares nearest-neighbour upsampling, the analytic
//! posterior mean and an unsupervised network.

use bpinn::analytic_bayes::{posterior_mean, NoisePrior};
use bpinn::datagen::{generate_dataset, DatasetSpec, SceneConfig, Task};
use bpinn::forward_ops::PsfKernel;
use bpinn::neural_net::{Architecture, NetworkSpec};
use bpinn::trainer::{split_dataset, train, TrainConfig, TrainMode};
use bpinn::uq_inference::point_estimate;
use bpinn::ImageGrid;

fn main() -> bpinn::Result<()> {
    let ds = generate_dataset(&DatasetSpec {
        scene: SceneConfig {
            size: (32, 32),
            ..Default::default()
        },
        task: Task::Superres,
        psf: PsfKernel::gaussian(5, 1.0)?,
        downsample_factor: 2,
        noise_variance: 1e-4,
        count: 50,
        supervised: true,
        seed: 3,
    })?;
    println!(
        "source {:?}, observation {:?}",
        ds.source_shape,
        ds.observation_shape()
    );
    let op = ds.forward_operator()?;

    // the network input is g upsampled to the source grid
    let spec = NetworkSpec::encoder_decoder(ds.source_shape, &Architecture::default())?;
    let cfg = TrainConfig {
        mode: TrainMode::Unsupervised,
        epochs: 40,
        seed: 3,
        ..Default::default()
    };
    let (params, _) = train(
        &spec,
        &cfg,
        &ds.unlabeled(),
        op.as_ref(),
        &ImageGrid::zeros(32, 32),
    )?;

    let (_, test) = split_dataset(&ds, cfg.split_fraction, cfg.seed)?;
    let prior = NoisePrior::centered(1e-4, 0.1, ds.source_shape)?;
    let mut mse = [0.0; 3];
    for s in &test.samples {
        let f = s.f.as_ref().unwrap();
        let (mean, _) = posterior_mean(op.as_ref(), &s.g, &prior, 1e-10, 2000)?;
        mse[0] += s.g.upsample_nearest(2).mse(f);
        mse[1] += mean.mse(f);
        mse[2] += point_estimate(&spec, &params, &s.g)?.mse(f);
    }
    for (name, m) in ["nearest upsampling", "analytic mean", "network"]
        .iter()
        .zip(mse)
    {
        println!("{name:<20} {:.4e}", m / test.len() as f64);
    }
    Ok(())
}
