//! Generate a dataset, store it as BPDS, read it back, and export one sample
//! in both image formats.
//!
//! Usage: `cargo run --example dataset_io [out_dir]`

use std::path::PathBuf;

use bpinn::datagen::{
    generate_dataset, load_dataset, save_dataset, DatasetSpec, SceneConfig, Task,
};
use bpinn::forward_ops::PsfKernel;
use bpinn::image_io::{range_sidecar, read_image, write_image, ImageFormat};

fn main() -> bpinn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bpinn-io"));
    std::fs::create_dir_all(&out)?;
    let spec = DatasetSpec {
        scene: SceneConfig {
            size: (64, 64),
            ..Default::default()
        },
        task: Task::Deblur,
        psf: PsfKernel::gaussian(9, 2.0)?,
        downsample_factor: 1,
        noise_variance: 1e-4,
        count: 8,
        supervised: true,
        seed: 99,
    };
    let ds = generate_dataset(&spec)?;
    let path = out.join("small.bpds");
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path)?;
    assert_eq!(back, ds);
    println!(
        "{} samples, {} bytes, round trip exact",
        back.len(),
        std::fs::metadata(&path)?.len()
    );

    let g = &ds.samples[0].g;
    let raw = out.join("g0.bpim");
    let pgm = out.join("g0.pgm");
    write_image(g, &raw, ImageFormat::RawF64)?;
    write_image(g, &pgm, ImageFormat::Pgm16)?;
    println!("rawf64 exact: {}", read_image(&raw)? == *g);
    // 16-bit quantisation over the stored range
    let q = read_image(&pgm)?;
    let step = (g.max() - g.min()) / 65535.0;
    let worst = q
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "pgm16 worst error {worst:.2e} (half step {:.2e}), range in {}",
        step / 2.0,
        range_sidecar(&pgm).display()
    );
    Ok(())
}
