//! Supervised training on (g, f) pairs, with and without the physics
//! terms, scored on 25 unseen scenes.
//!
//! Usage: `cargo run --release --example supervised_deblur [seed] [epochs]`

use bpinn::datagen::{generate_dataset, DatasetSpec, SceneConfig, Task};
use bpinn::forward_ops::PsfKernel;
use bpinn::losses::LossWeights;
use bpinn::neural_net::{Architecture, NetworkParams, NetworkSpec};
use bpinn::trainer::{split_dataset, train, TrainConfig};
use bpinn::uq_inference::point_estimate;
use bpinn::ImageGrid;

fn main() -> bpinn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let epochs: usize = args.next().map_or(50, |s| s.parse().expect("epochs"));

    let ds = generate_dataset(&DatasetSpec {
        scene: SceneConfig {
            size: (32, 32),
            ..Default::default()
        },
        task: Task::Deblur,
        psf: PsfKernel::gaussian(9, 2.0)?,
        downsample_factor: 1,
        noise_variance: 1e-4,
        count: 125,
        supervised: true,
        seed,
    })?;
    let (_, test) = split_dataset(&ds, 0.8, seed)?;
    let spec = NetworkSpec::encoder_decoder((32, 32), &Architecture::default())?;
    let op = ds.forward_operator()?;
    let f_bar = ImageGrid::zeros(32, 32);
    let score = |p: &NetworkParams| -> bpinn::Result<f64> {
        let mut total = 0.0;
        for s in &test.samples {
            total += point_estimate(&spec, p, &s.g)?.mse(s.f.as_ref().unwrap());
        }
        Ok(total / test.len() as f64)
    };

    let full = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    let labels = TrainConfig {
        loss_weights: LossWeights::labels_only(full.loss_weights.v_f),
        ..full.clone()
    };
    let baseline = test
        .samples
        .iter()
        .map(|s| s.g.mse(s.f.as_ref().unwrap()))
        .sum::<f64>()
        / test.len() as f64;
    println!("blurred input        {baseline:.4e}");
    for (name, cfg) in [("labels + physics", &full), ("labels only", &labels)] {
        let (p, hist) = train(&spec, cfg, &ds, op.as_ref(), &f_bar)?;
        let last = hist
            .records
            .last()
            .map(|r| r.train.total)
            .unwrap_or(f64::NAN);
        println!(
            "{name:<20} {:.4e}  (final train loss {last:.3e})",
            score(&p)?
        );
    }
    Ok(())
}
