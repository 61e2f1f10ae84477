//! Config-driven experiment commands behind the `gckd` binary: dataset
//! generation, training, evaluation, the three-mode ablation and the
//! gradient check.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, target_index, MetricsReport};
use crate::synth_data::{self, generate, DatasetSpec, Generated, SourcePair, TargetGroundTruth, TargetSet};
use crate::trainer::{
    adapt, adapt_step, grad_check, warmup, AblationMode, GradCheckOptions, GradCheckReport, TrainConfig,
    TrainState,
};

pub const SOURCE_FILE: &str = "source.rec";
pub const TARGET_FILE: &str = "target.rec";
pub const TRUTH_FILE: &str = "target_truth.rec";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_TABLE_FILE: &str = "ablation.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: AblationMode,
    pub out_dir: PathBuf,
    /// Seeds of the ablation sweep.
    pub seeds: Vec<u64>,
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::CmkdGmp,
            out_dir: PathBuf::from("out"),
            seeds: (0..5).collect(),
            data: DatasetSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// The same experiment with data and training seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.rng_seed = seed;
        c.train.seed = seed;
        c
    }

    /// Hash of the canonical config with the run-identity fields (mode,
    /// output directory, seeds) cleared, so that runs of one ablation share
    /// it and runs of different experiments do not.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.mode = AblationMode::Baseline;
        c.out_dir = PathBuf::new();
        c.seeds.clear();
        c.data.rng_seed = 0;
        c.train.seed = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Hash of the data section alone, seed included; stamped on dataset
    /// files so training refuses data generated from a different spec.
    pub fn data_fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(&self.data).expect("spec serializes").as_bytes())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub data_fingerprint: String,
    pub source_pairs: usize,
    pub target_images: usize,
    pub target_texts: usize,
}

pub fn write_dataset(dir: &Path, data: &Generated, data_fingerprint: &str) -> Result<GenSummary> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join(SOURCE_FILE))?;
    synth_data::write_source(&mut w, data_fingerprint, &data.source)?;
    w.flush()?;
    let mut w = create(&dir.join(TARGET_FILE))?;
    synth_data::write_target(&mut w, data_fingerprint, &data.target)?;
    w.flush()?;
    let mut w = create(&dir.join(TRUTH_FILE))?;
    synth_data::write_ground_truth(&mut w, data_fingerprint, &data.ground_truth)?;
    w.flush()?;
    Ok(GenSummary {
        data_fingerprint: data_fingerprint.to_owned(),
        source_pairs: data.source.len(),
        target_images: data.target.images.len(),
        target_texts: data.target.texts.len(),
    })
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenSummary> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    write_dataset(&cfg.out_dir, &data, &cfg.data_fingerprint())
}

fn check_data_fp(found: &str, cfg: &ExperimentConfig, file: &str) -> Result<()> {
    if found != cfg.data_fingerprint() {
        return Err(Error::Config(format!(
            "{file} was generated from a different data spec; rerun gen"
        )));
    }
    Ok(())
}

/// Loads the training inputs. The ground-truth sidecar is not read here.
pub fn load_training_data(cfg: &ExperimentConfig) -> Result<(Vec<SourcePair>, TargetSet)> {
    let (fp, source) = synth_data::read_source(open(&cfg.out_dir.join(SOURCE_FILE))?)?;
    check_data_fp(&fp, cfg, SOURCE_FILE)?;
    let (fp, target) = synth_data::read_target(open(&cfg.out_dir.join(TARGET_FILE))?)?;
    check_data_fp(&fp, cfg, TARGET_FILE)?;
    Ok((source, target))
}

pub fn load_ground_truth(cfg: &ExperimentConfig) -> Result<TargetGroundTruth> {
    let (fp, truth) = synth_data::read_ground_truth(open(&cfg.out_dir.join(TRUTH_FILE))?)?;
    check_data_fp(&fp, cfg, TRUTH_FILE)?;
    Ok(truth)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub fingerprint: String,
    pub mode: AblationMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub fingerprint: String,
    pub mode: AblationMode,
    pub warmup_steps: usize,
    pub adapt_steps: u64,
}

fn json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io(e.into()))?;
    Ok(writeln!(w)?)
}

/// Warm-up then adaptation, writing every loss record to `stream` as one
/// JSON object per line after a header line.
pub fn train_run<W: Write>(
    cfg: &ExperimentConfig,
    source: &[SourcePair],
    target: &TargetSet,
    stream: &mut W,
) -> Result<(TrainState, TrainSummary)> {
    let d_raw = source
        .first()
        .map(|p| p.image.raw.len())
        .ok_or_else(|| Error::Usage("no source pairs".into()))?;
    let fingerprint = cfg.fingerprint();
    json_line(
        stream,
        &StreamHeader {
            fingerprint: fingerprint.clone(),
            mode: cfg.mode,
            seed: cfg.train.seed,
        },
    )?;
    let mut state = TrainState::new(&cfg.train, d_raw)?;
    let warm = warmup(&mut state, source, &cfg.train)?;
    for r in &warm {
        json_line(stream, r)?;
    }
    let steps = adapt(&mut state, source, target, &cfg.train, cfg.mode, &mut |r| json_line(stream, r))?;
    Ok((
        state,
        TrainSummary {
            fingerprint,
            mode: cfg.mode,
            warmup_steps: warm.len(),
            adapt_steps: steps,
        },
    ))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (source, target) = load_training_data(cfg)?;
    let mut stream = create(&cfg.out_dir.join(METRICS_FILE))?;
    let (state, summary) = train_run(cfg, &source, &target, &mut stream)?;
    stream.flush()?;
    checkpoint::save_state(&cfg.out_dir.join(CHECKPOINT_FILE), &state, &summary.fingerprint)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub metrics: MetricsReport,
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (fingerprint, ckpt) = checkpoint::load(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    let (fp, target) = synth_data::read_target(open(&cfg.out_dir.join(TARGET_FILE))?)?;
    check_data_fp(&fp, cfg, TARGET_FILE)?;
    let truth = load_ground_truth(cfg)?;
    let metrics = evaluate(&target_index(&ckpt.student().encoders, &target, &truth)?, &[])?;
    let report = RunReport {
        fingerprint,
        mode: cfg.mode,
        seed: cfg.train.seed,
        metrics,
    };
    let mut w = create(&cfg.out_dir.join(EVAL_FILE))?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Error::Io(e.into()))?;
    w.flush()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Standard error of the Rank-1 mean over seeds.
    pub rank1_se: f64,
    pub rank1_per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_err(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

impl AblationTable {
    /// Aggregates run reports per mode. Reports from different experiments
    /// (fingerprints) are never mixed.
    pub fn from_reports(reports: &[RunReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Usage("no runs to aggregate".into()))?;
        if let Some(r) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
            return Err(Error::Usage(format!(
                "refusing to compare runs with fingerprints {} and {}",
                first.fingerprint, r.fingerprint
            )));
        }
        let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let rows = AblationMode::ALL
            .into_iter()
            .filter_map(|mode| {
                let runs: Vec<&MetricsReport> =
                    reports.iter().filter(|r| r.mode == mode).map(|r| &r.metrics).collect();
                if runs.is_empty() {
                    return None;
                }
                let col = |f: fn(&MetricsReport) -> f64| mean(&runs.iter().map(|m| f(m)).collect::<Vec<_>>());
                let r1: Vec<f64> = runs.iter().map(|m| m.rank1).collect();
                Some(AblationRow {
                    mode,
                    rank1: col(|m| m.rank1),
                    rank5: col(|m| m.rank5),
                    rank10: col(|m| m.rank10),
                    map: col(|m| m.map),
                    rank1_se: std_err(&r1),
                    rank1_per_seed: r1,
                })
            })
            .collect();
        Ok(Self {
            fingerprint: first.fingerprint.clone(),
            seeds,
            rows,
        })
    }

    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Markdown table: one row per mode, Rank-1/5/10 and mAP columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | Rank-1 | Rank-5 | Rank-10 | mAP |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let name = match r.mode {
                AblationMode::Baseline => "Baseline",
                AblationMode::Cmkd => "CMKD",
                AblationMode::CmkdGmp => "CMKD + GMP",
            };
            s += &format!(
                "| {name} | {:.2} ± {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.rank1, r.rank1_se, r.rank5, r.rank10, r.map
            );
        }
        s
    }
}

/// Runs all three modes for every configured seed. The warm-up is shared by
/// the modes of one seed: it does not depend on the mode, so this equals
/// three independent runs.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<(AblationTable, Vec<RunReport>)> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let run_cfg = cfg.with_seed(seed);
        let data = generate(&run_cfg.data)?;
        let mut warm = TrainState::new(&run_cfg.train, run_cfg.data.d_raw)?;
        warmup(&mut warm, &data.source, &run_cfg.train)?;
        for mode in AblationMode::ALL {
            let mut state = warm.clone();
            adapt(&mut state, &data.source, &data.target, &run_cfg.train, mode, &mut |_| Ok(()))?;
            let metrics = evaluate(&target_index(&state.student().encoders, &data.target, &data.ground_truth)?, &[])?;
            log::info!("seed {seed} {mode}: Rank-1 {:.2}", metrics.rank1);
            reports.push(RunReport {
                fingerprint: fingerprint.clone(),
                mode,
                seed,
                metrics,
            });
        }
    }
    Ok((AblationTable::from_reports(&reports)?, reports))
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationTable> {
    let (table, _) = run_ablation(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = create(&cfg.out_dir.join(ABLATION_FILE))?;
    serde_json::to_writer_pretty(&mut w, &table).map_err(|e| Error::Io(e.into()))?;
    w.flush()?;
    fs::write(cfg.out_dir.join(ABLATION_TABLE_FILE), table.to_markdown())?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Builds a small instance from the config, runs adaptation steps until the
/// queues are full, then checks the gradient on the next batch.
pub fn gradcheck_instance(cfg: &ExperimentConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    let t = &cfg.train;
    let mut state = TrainState::new(t, cfg.data.d_raw)?;
    let bs = t.batch_size;
    let batch = |i: usize| {
        let pick = |len: usize| -> Vec<usize> { (0..bs).map(|k| (i * bs + k) % len).collect() };
        let src: Vec<&SourcePair> = pick(data.source.len()).into_iter().map(|j| &data.source[j]).collect();
        let ti: Vec<_> = pick(data.target.images.len()).into_iter().map(|j| &data.target.images[j]).collect();
        let tt: Vec<_> = pick(data.target.texts.len()).into_iter().map(|j| &data.target.texts[j]).collect();
        (src, ti, tt)
    };
    let fill_steps = t.memory.capacity.div_ceil(bs);
    for i in 0..fill_steps {
        let (s, ti, tt) = batch(i);
        adapt_step(&mut state, &s, &ti, &tt, t, cfg.mode)?;
    }
    let (s, ti, tt) = batch(fill_steps);
    grad_check(&state, &s, &ti, &tt, t, cfg.mode, opts)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let report = gradcheck_instance(cfg, &GradCheckOptions::default())?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = create(&cfg.out_dir.join("gradcheck.json"))?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Error::Io(e.into()))?;
    w.flush()?;
    Ok(report)
}

/// Reads a metrics stream back as raw lines (header first).
pub fn read_stream(path: &Path) -> Result<Vec<String>> {
    open(path)?.lines().map(|l| l.map_err(Error::from)).collect()
}
