//! Generates a small synthetic dataset and writes the three record files.
//!
//! Run with `cargo run --example generate_data -- [OUT_DIR]`.

use gckd::experiment::{write_dataset, ExperimentConfig};
use gckd::numerics::norm;
use gckd::synth_data::{generate, DatasetSpec};

fn main() -> gckd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/example_data".into());
    let spec = DatasetSpec {
        num_identities_source: 50,
        num_identities_target: 40,
        samples_per_identity_per_modality: 2,
        d_raw: 16,
        ..Default::default()
    };
    let data = generate(&spec)?;

    let mean_norm = |rows: Vec<&[f64]>| rows.iter().map(|r| norm(r)).sum::<f64>() / rows.len() as f64;
    println!("source pairs:   {}", data.source.len());
    println!("target images:  {}", data.target.images.len());
    println!("target texts:   {}", data.target.texts.len());
    println!(
        "mean raw norm:  source {:.2}, target {:.2} (target offset norm {:.2})",
        mean_norm(data.source.iter().map(|p| p.image.raw.as_slice()).collect()),
        mean_norm(data.target.images.iter().map(|s| s.raw.as_slice()).collect()),
        spec.target_offset_norm()
    );

    let cfg = ExperimentConfig {
        data: spec,
        ..Default::default()
    };
    let summary = write_dataset(out.as_ref(), &data, &cfg.data_fingerprint())?;
    println!("wrote {out} (data fingerprint {}...)", &summary.data_fingerprint[..12]);
    Ok(())
}
