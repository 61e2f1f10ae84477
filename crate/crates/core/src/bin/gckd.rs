use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gckd::experiment::{self, ExperimentConfig};
use gckd::trainer::AblationMode;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gckd", version, about = "Cross-domain distillation experiments on synthetic retrieval data")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML experiment config; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data and training (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// baseline, cmkd or cmkd_gmp (overrides the config)
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<AblationMode>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the source, target and ground-truth record files
    Gen,
    /// Warm-up and adaptation; writes the metrics stream and a checkpoint
    Train,
    /// Evaluate the checkpoint on the target set
    Eval,
    /// Run all three modes over the configured seeds
    Ablate,
    /// Compare analytic and finite-difference gradients
    Gradcheck,
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: gckd::Error| e.to_string())
}

fn print<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("report serializes"));
}

fn run(cli: Cli) -> gckd::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    match cli.verb {
        Verb::Gen => print(&experiment::cmd_gen(&cfg)?),
        Verb::Train => print(&experiment::cmd_train(&cfg)?),
        Verb::Eval => {
            let r = experiment::cmd_eval(&cfg)?;
            let m = &r.metrics;
            println!(
                "{{\"mode\":\"{}\",\"rank1\":{},\"rank5\":{},\"rank10\":{},\"map\":{}}}",
                r.mode, m.rank1, m.rank5, m.rank10, m.map
            );
        }
        Verb::Ablate => print!("{}", experiment::cmd_ablate(&cfg)?.to_markdown()),
        Verb::Gradcheck => {
            let r = experiment::cmd_gradcheck(&cfg)?;
            print(&r);
            if !r.passed {
                return Err(gckd::Error::Structural(format!(
                    "gradient check failed: max relative error {:e} at {}",
                    r.max_rel_err, r.worst_param
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
