//! Physics-only training: the network sees observations g and learns from
//! ‖g − H f_NN(g)‖² alone. 16x16 scenes, 20 training images, 5 held out.

use bpinn::datagen::{generate_dataset, DatasetSpec, SceneConfig, Task};
use bpinn::forward_ops::PsfKernel;
use bpinn::neural_net::{Architecture, NetworkSpec};
use bpinn::trainer::{split_dataset, train, TrainConfig, TrainMode};
use bpinn::uq_inference::point_estimate;
use bpinn::ImageGrid;

fn main() -> bpinn::Result<()> {
    let seed = 0;
    let ds = generate_dataset(&DatasetSpec {
        scene: SceneConfig {
            size: (16, 16),
            ..Default::default()
        },
        task: Task::Deblur,
        psf: PsfKernel::gaussian(3, 1.0)?,
        downsample_factor: 1,
        noise_variance: 1e-4,
        count: 25,
        supervised: true, // labels kept only to score the held-out set
        seed,
    })?;
    let spec = NetworkSpec::encoder_decoder((16, 16), &Architecture::default())?;
    let op = ds.forward_operator()?;
    let cfg = TrainConfig {
        mode: TrainMode::Unsupervised,
        seed,
        ..Default::default()
    };
    let (params, hist) = train(
        &spec,
        &cfg,
        &ds.unlabeled(),
        op.as_ref(),
        &ImageGrid::zeros(16, 16),
    )?;

    for r in hist.records.iter().step_by(10).chain(hist.records.last()) {
        println!(
            "epoch {:>3}  residual {:.4e}",
            r.epoch, r.train.physics_residual
        );
    }
    // same seed, same partition as inside train()
    let (_, held_out) = split_dataset(&ds, cfg.split_fraction, seed)?;
    for (i, s) in held_out.samples.iter().enumerate() {
        let f = s.f.as_ref().unwrap();
        let est = point_estimate(&spec, &params, &s.g)?;
        println!(
            "held-out {i}: blurred {:.3e}  network {:.3e}",
            s.g.mse(f),
            est.mse(f)
        );
    }
    Ok(())
}
