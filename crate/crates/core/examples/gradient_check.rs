//! Checks the analytic adaptation gradient against central differences.
//!
//! `cargo run --release --example gradient_check -- [CONFIG]`; defaults to
//! `configs/toy_gradcheck.toml`.

use std::path::PathBuf;

use gckd::experiment::{gradcheck_instance, ExperimentConfig};
use gckd::trainer::GradCheckOptions;

fn main() -> gckd::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/toy_gradcheck.toml"));
    let cfg = ExperimentConfig::load(&path)?;
    let report = gradcheck_instance(&cfg, &GradCheckOptions::default())?;
    println!("checked {} parameters in mode {}", report.checked, cfg.mode);
    println!(
        "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err, report.worst_param, report.analytic, report.numeric
    );
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(())
}
