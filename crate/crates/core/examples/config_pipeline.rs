//! Drive the library from a TOML run configuration, the way the CLI does.
//!
//! Usage: `cargo run --release --example config_pipeline [config.toml]`

use bpinn::config::RunConfig;
use bpinn::datagen::generate_dataset;
use bpinn::neural_net::NetworkSpec;
use bpinn::trainer::train;
use bpinn::ImageGrid;

fn main() -> bpinn::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml_str(
            r#"
            [scene]
            size = [16, 16]
            [operator]
            psf_size = 3
            psf_sigma = 1.0
            [data]
            count = 25
            supervised = false
            [train]
            epochs = 10
            "#,
        )?,
    };
    cfg.validate()?;
    let ds = generate_dataset(&cfg.dataset_spec()?)?;
    let spec = NetworkSpec::encoder_decoder(ds.source_shape, &cfg.architecture())?;
    let tc = cfg.train_config(ds.is_supervised());
    println!(
        "{:?} training on {} samples, {} parameters",
        tc.mode,
        ds.len(),
        spec.param_count()
    );
    let f_bar = ImageGrid::filled(ds.source_shape.0, ds.source_shape.1, cfg.loss.f_bar);
    let op = ds.forward_operator()?;
    let (_, hist) = train(&spec, &tc, &ds, op.as_ref(), &f_bar)?;
    print!("{}", hist.to_tsv());
    Ok(())
}
