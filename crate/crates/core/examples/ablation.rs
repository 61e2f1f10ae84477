//! Three-mode ablation over the configured seeds, printed as a table.
//!
//! `cargo run --release --example ablation -- [CONFIG]`; the default is the
//! standard benchmark and takes well under a minute in release mode.

use std::path::PathBuf;

use gckd::experiment::{run_ablation, ExperimentConfig};

fn main() -> gckd::Result<()> {
    env_logger::init();
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.toml"));
    let cfg = ExperimentConfig::load(&path)?;
    let (table, reports) = run_ablation(&cfg)?;
    for r in &reports {
        println!("seed {} {:<9} Rank-1 {:6.2}", r.seed, r.mode.as_str(), r.metrics.rank1);
    }
    println!();
    print!("{}", table.to_markdown());
    Ok(())
}
