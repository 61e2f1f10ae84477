//! Encodes source images and texts with freshly initialized towers.

use gckd::encoder::{forward, EncoderDims, EncoderParams, Provenance};
use gckd::numerics::norm;
use gckd::synth_data::{generate, DatasetSpec};

fn main() -> gckd::Result<()> {
    let spec = DatasetSpec {
        num_identities_source: 5,
        num_identities_target: 5,
        samples_per_identity_per_modality: 1,
        d_raw: 12,
        ..Default::default()
    };
    let data = generate(&spec)?;
    let encoders = EncoderParams::init(0, EncoderDims::new(spec.d_raw, 6))?;

    let images: Vec<_> = data.source.iter().map(|p| &p.image).collect();
    let texts: Vec<_> = data.source.iter().map(|p| &p.text).collect();
    let fi = forward(&encoders, &images, Provenance::Student)?;
    let ft = forward(&encoders, &texts, Provenance::Student)?;
    println!("image batch: {:?}, {} x {}", fi.role(), fi.len(), fi.dim());
    println!("text batch:  {:?}, {} x {}", ft.role(), ft.len(), ft.dim());

    let sims = fi.features().matmul_t(ft.features())?;
    println!("image-text cosine (rows: images, cols: texts)");
    for i in 0..sims.rows() {
        let row: Vec<String> = sims.row(i).iter().map(|s| format!("{s:+.2}")).collect();
        println!("  {}   |f|={:.6}", row.join(" "), norm(fi.features().row(i)));
    }
    Ok(())
}
