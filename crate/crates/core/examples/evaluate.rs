//! Target retrieval before and after adaptation, in each mode.

use gckd::evaluator::{evaluate, target_index};
use gckd::synth_data::{generate, DatasetSpec};
use gckd::trainer::{adapt, warmup, AblationMode, TrainConfig, TrainState};

fn main() -> gckd::Result<()> {
    let spec = DatasetSpec {
        num_identities_source: 100,
        num_identities_target: 100,
        ..Default::default()
    };
    let data = generate(&spec)?;
    let cfg = TrainConfig {
        lr: 2e-3,
        epochs: 2,
        ..Default::default()
    };
    let mut warm = TrainState::new(&cfg, spec.d_raw)?;
    let before = evaluate(&target_index(&warm.student().encoders, &data.target, &data.ground_truth)?, &[])?;
    println!("random init   Rank-1 {:6.2}  mAP {:6.2}", before.rank1, before.map);
    warmup(&mut warm, &data.source, &cfg)?;

    for mode in AblationMode::ALL {
        let mut state = warm.clone();
        let steps = adapt(&mut state, &data.source, &data.target, &cfg, mode, &mut |_| Ok(()))?;
        let m = evaluate(&target_index(&state.student().encoders, &data.target, &data.ground_truth)?, &[20])?;
        println!(
            "{:<9} {:4} steps  Rank-1 {:6.2}  Rank-5 {:6.2}  Rank-10 {:6.2}  Rank-20 {:6.2}  mAP {:6.2}",
            mode.as_str(),
            steps,
            m.rank1,
            m.rank5,
            m.rank10,
            m.rank_k[0].1,
            m.map
        );
    }
    Ok(())
}
