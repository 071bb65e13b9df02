//! The full protocol: 1000 labelled 128x128 scenes, 800 for training, then
//! mean and variance images for a held-out observation. Hours of CPU time at
//! full size; `COUNT` and `EPOCHS` shrink it.
//!
//! Usage: `COUNT=100 EPOCHS=5 cargo run --release --example full_scale [out_dir]`

use std::path::PathBuf;

use bpinn::checkpoint::save_checkpoint;
use bpinn::datagen::{generate_dataset, DatasetSpec, SceneConfig, Task};
use bpinn::forward_ops::PsfKernel;
use bpinn::image_io::{write_image, ImageFormat};
use bpinn::neural_net::{Architecture, NetworkSpec};
use bpinn::trainer::{split_dataset, train, TrainConfig};
use bpinn::uq_inference::mc_dropout_predict;
use bpinn::ImageGrid;

fn env_or(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .map_or(default, |v| v.parse().expect(key))
}

fn main() -> bpinn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs/full"));
    std::fs::create_dir_all(&out)?;
    let ds = generate_dataset(&DatasetSpec {
        scene: SceneConfig::default(),
        task: Task::Deblur,
        psf: PsfKernel::gaussian(9, 2.0)?,
        downsample_factor: 1,
        noise_variance: 1e-4,
        count: env_or("COUNT", 1000),
        supervised: true,
        seed: 0,
    })?;
    let cfg = TrainConfig {
        epochs: env_or("EPOCHS", 50),
        ..Default::default()
    };
    let (train_set, test) = split_dataset(&ds, cfg.split_fraction, cfg.seed)?;
    println!("{} training / {} held out", train_set.len(), test.len());

    let spec = NetworkSpec::encoder_decoder(ds.source_shape, &Architecture::default())?;
    let op = ds.forward_operator()?;
    let (params, hist) = train(&spec, &cfg, &ds, op.as_ref(), &ImageGrid::zeros(128, 128))?;
    save_checkpoint(&spec, &params, out.join("model.bpnn"))?;
    std::fs::write(out.join("history.tsv"), hist.to_tsv())?;

    let s = &test.samples[0];
    let uq = mc_dropout_predict(&spec, &params, &s.g, 50, 0)?;
    let f = s.f.as_ref().unwrap();
    println!(
        "held-out 0: blurred mse {:.3e}, mean mse {:.3e}",
        s.g.mse(f),
        uq.mean.mse(f)
    );
    for (name, img) in [
        ("truth", f),
        ("observed", &s.g),
        ("mean", &uq.mean),
        ("variance", &uq.var_diag),
    ] {
        write_image(img, out.join(format!("{name}.pgm")), ImageFormat::Pgm16)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
