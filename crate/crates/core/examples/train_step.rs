//! Warm-up on source pairs followed by a handful of adaptation steps, with
//! the per-step loss report.

use gckd::synth_data::{generate, DatasetSpec, SourcePair, UnlabeledSample};
use gckd::trainer::{adapt_step, warmup, AblationMode, GraphConfig, MemoryConfig, TrainConfig, TrainState};

fn main() -> gckd::Result<()> {
    let data = generate(&DatasetSpec {
        num_identities_source: 40,
        num_identities_target: 40,
        samples_per_identity_per_modality: 2,
        d_raw: 16,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        embed_dim: 16,
        lr: 1e-3,
        warmup_epochs: 3,
        memory: MemoryConfig { capacity: 32 },
        graph: GraphConfig { k: 5, layers: 2 },
        ..Default::default()
    };
    let mut state = TrainState::new(&cfg, 16)?;
    for r in warmup(&mut state, &data.source, &cfg)? {
        println!("warmup step {:2} epoch {} loss {:.4}", r.step, r.epoch, r.loss);
    }

    let b = cfg.batch_size;
    for i in 0..12 {
        let src: Vec<&SourcePair> = data.source[i * b..(i + 1) * b].iter().collect();
        let ti: Vec<&UnlabeledSample> = data.target.images[i * b..(i + 1) * b].iter().collect();
        let tt: Vec<&UnlabeledSample> = data.target.texts[i * b..(i + 1) * b].iter().collect();
        let r = adapt_step(&mut state, &src, &ti, &tt, &cfg, AblationMode::CmkdGmp)?;
        println!(
            "adapt {:2}: total {:.4} itc {:.4} itm {:.4} pos {} neg {} skipped {:?}",
            r.iteration, r.total, r.cd_itc, r.cd_itm, r.positives, r.negatives, r.skipped
        );
    }
    Ok(())
}
