mod common;

use gckd::encoder::{EncoderParams, FeatureBatch, FeatureRole, Provenance};
use gckd::evaluator::{evaluate, source_index, target_index, RetrievalIndex};
use gckd::experiment::{self, ExperimentConfig};
use gckd::graph::{build_graph, knn_lists};
use gckd::losses::LossConfig;
use gckd::memory::MemoryBank;
use gckd::model::ModelParams;
use gckd::numerics::{l2_normalize, Matrix};
use gckd::synth_data::{generate, DatasetSpec, Domain, Generated, Modality, SourcePair, UnlabeledSample};
use gckd::trainer::{
    adapt, adapt_step, compare_gradients, make_plan, objective, warmup, AblationMode, GradCheckOptions, RawBatch,
    TrainConfig, TrainState,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn toy() -> (Generated, TrainConfig) {
    let cfg = small_experiment(std::path::Path::new("unused"), AblationMode::CmkdGmp);
    (generate(&cfg.data).unwrap(), cfg.train)
}

/// Batch `i` of size `b`, cycling through each list.
fn batch_at(data: &Generated, i: usize, b: usize) -> (Vec<&SourcePair>, Vec<&UnlabeledSample>, Vec<&UnlabeledSample>) {
    let pick = |len: usize| (0..b).map(move |k| (i * b + k) % len);
    (
        pick(data.source.len()).map(|j| &data.source[j]).collect(),
        pick(data.target.images.len()).map(|j| &data.target.images[j]).collect(),
        pick(data.target.texts.len()).map(|j| &data.target.texts[j]).collect(),
    )
}

fn warmed(data: &Generated, cfg: &TrainConfig) -> TrainState {
    let mut state = TrainState::new(cfg, data.source[0].image.raw.len()).unwrap();
    warmup(&mut state, &data.source, cfg).unwrap();
    state
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[test]
fn zero_loss_weights_leave_the_student_unchanged() {
    let (data, mut cfg) = toy();
    cfg.loss = LossConfig {
        lambda_itc: 0.0,
        lambda_itm: 0.0,
        lambda_aux: 0.0,
        ..cfg.loss
    };
    cfg.weight_decay = 0.0;
    for mode in [AblationMode::Cmkd, AblationMode::CmkdGmp] {
        let mut state = warmed(&data, &cfg);
        let before = state.student().clone();
        for i in 0..12 {
            let (s, ti, tt) = batch_at(&data, i, cfg.batch_size);
            let raw = RawBatch::new(&s, &ti, &tt).unwrap();
            let (plan, _) = make_plan(&state, &raw, &cfg, mode).unwrap();
            let obj = objective(state.student(), &raw, &plan, &cfg.loss).unwrap();
            assert_eq!(obj.grads.max_abs(), 0.0);
            adapt_step(&mut state, &s, &ti, &tt, &cfg, mode).unwrap();
        }
        assert_eq!(state.student(), &before, "{mode}");
    }
}

#[test]
fn a_small_step_against_the_gradient_lowers_the_objective() {
    let (data, cfg) = toy();
    let mut state = warmed(&data, &cfg);
    let mode = AblationMode::CmkdGmp;
    for i in 0..10 {
        let (s, ti, tt) = batch_at(&data, i, cfg.batch_size);
        adapt_step(&mut state, &s, &ti, &tt, &cfg, mode).unwrap();
    }
    let (s, ti, tt) = batch_at(&data, 10, cfg.batch_size);
    let raw = RawBatch::new(&s, &ti, &tt).unwrap();
    let (plan, _) = make_plan(&state, &raw, &cfg, mode).unwrap();
    let start = objective(state.student(), &raw, &plan, &cfg.loss).unwrap();
    assert!(start.grads.max_abs() > 0.0);
    let mut moved = state.student().clone();
    moved.axpy(-1e-3, &start.grads);
    let after = objective(&moved, &raw, &plan, &cfg.loss).unwrap();
    assert!(after.report.total < start.report.total, "{} !< {}", after.report.total, start.report.total);
}

#[test]
fn teacher_follows_the_ema_recurrence_over_real_steps() {
    let (data, cfg) = toy();
    let mut state = warmed(&data, &cfg);
    let mut replay = state.teacher().clone();
    let m = cfg.momentum;
    for i in 0..8 {
        let (s, ti, tt) = batch_at(&data, i, cfg.batch_size);
        adapt_step(&mut state, &s, &ti, &tt, &cfg, AblationMode::CmkdGmp).unwrap();
        for (t, s) in replay.tensors_mut().into_iter().zip(state.student().tensors()) {
            for (tv, sv) in t.iter_mut().zip(s) {
                *tv = m * *tv + (1.0 - m) * sv;
            }
        }
        assert_eq!(state.teacher(), &replay, "step {i}");
    }
}

#[test]
fn banks_fill_with_one_batch_per_step() {
    let (data, cfg) = toy();
    let mut state = warmed(&data, &cfg);
    let b = cfg.batch_size;
    let cap = cfg.memory.capacity;
    for i in 0..20 {
        let (s, ti, tt) = batch_at(&data, i, b);
        let report = adapt_step(&mut state, &s, &ti, &tt, &cfg, AblationMode::Cmkd).unwrap();
        assert_eq!(report.iteration, i as u64);
        for bank in state.banks().iter() {
            assert_eq!(bank.len(), ((i + 1) * b).min(cap));
            let tags: Vec<u64> = bank.entries().map(|e| e.iteration).collect();
            assert!(tags.windows(2).all(|w| w[0] <= w[1]));
            assert!(tags[tags.len() - b..].iter().all(|&t| t == i as u64));
        }
    }
}

#[test]
fn first_step_skips_the_contrast_term() {
    let (data, cfg) = toy();
    let mut state = warmed(&data, &cfg);
    let (s, ti, tt) = batch_at(&data, 0, cfg.batch_size);
    let r = adapt_step(&mut state, &s, &ti, &tt, &cfg, AblationMode::CmkdGmp).unwrap();
    assert!(r.skipped.contains(&"cd_itc".to_owned()));
    assert!(r.total.is_finite());
}

#[test]
fn a_corrupted_gradient_is_caught() {
    let cfg = ExperimentConfig::load(&config_path("toy_gradcheck.toml")).unwrap();
    let data = generate(&cfg.data).unwrap();
    let t = &cfg.train;
    let mut state = TrainState::new(t, cfg.data.d_raw).unwrap();
    for i in 0..4 {
        let (s, ti, tt) = batch_at(&data, i, t.batch_size);
        adapt_step(&mut state, &s, &ti, &tt, t, cfg.mode).unwrap();
    }
    let (s, ti, tt) = batch_at(&data, 4, t.batch_size);
    let raw = RawBatch::new(&s, &ti, &tt).unwrap();
    let (plan, _) = make_plan(&state, &raw, t, cfg.mode).unwrap();
    let f = |p: &ModelParams| Ok(objective(p, &raw, &plan, &t.loss)?.report.total);
    let mut grads = objective(state.student(), &raw, &plan, &t.loss).unwrap().grads;
    let opts = GradCheckOptions::default();
    assert!(compare_gradients(state.student(), &grads, f, &opts).unwrap().passed);

    let idx = 17;
    grads.set_flat(idx, grads.get_flat(idx) * 1.01 + 1e-3);
    let report = compare_gradients(state.student(), &grads, f, &opts).unwrap();
    assert!(!report.passed);
    let name = &state.student().named_tensors()[0].0;
    assert_eq!(report.worst_param, format!("{name}[{idx}]"));
}

#[test]
fn adapt_reports_every_step() {
    let (data, cfg) = toy();
    let mut state = warmed(&data, &cfg);
    let mut seen = Vec::new();
    let steps = adapt(&mut state, &data.source, &data.target, &cfg, AblationMode::Cmkd, &mut |r| {
        seen.push(r.iteration);
        Ok(())
    })
    .unwrap();
    let expect = data.target.images.len().div_ceil(cfg.batch_size) * cfg.epochs;
    assert_eq!(steps as usize, expect);
    assert_eq!(seen, (0..expect as u64).collect::<Vec<_>>());
    assert_eq!(state.iteration(), steps);
}

#[test]
fn warmup_separates_noiseless_source_pairs() {
    let spec = DatasetSpec {
        num_identities_source: 20,
        num_identities_target: 1,
        samples_per_identity_per_modality: 1,
        d_raw: 8,
        domain_shift_strength: 0.0,
        modality_gap_strength: 0.0,
        noise_sigma: 0.0,
        rng_seed: 3,
    };
    let data = generate(&spec).unwrap();
    let cfg = TrainConfig {
        embed_dim: 8,
        warmup_epochs: 60,
        warmup_batch_size: 20,
        warmup_lr: 1e-2,
        weight_decay: 0.0,
        ..Default::default()
    };
    let state = warmed(&data, &cfg);
    let r = evaluate(&source_index(&state.student().encoders, &data.source).unwrap(), &[]).unwrap();
    assert_eq!(r.rank1, 100.0);
}

#[test]
fn random_encoders_retrieve_at_chance() {
    let mut total = 0.0;
    for seed in 0..10 {
        let data = generate(&DatasetSpec {
            num_identities_target: 100,
            samples_per_identity_per_modality: 1,
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let params = ModelParams::init(seed, cfg.model_dims(32)).unwrap();
        total += evaluate(&target_index(&params.encoders, &data.target, &data.ground_truth).unwrap(), &[])
            .unwrap()
            .rank1;
    }
    let mean = total / 10.0;
    assert!((mean - 1.0).abs() <= 3.0, "mean Rank-1 {mean}");
}

/// Without a domain shift the three modes should be statistically
/// indistinguishable. They are not in this implementation: see README.
#[test]
#[ignore = "expectation does not hold; graph propagation still helps without shift"]
fn no_shift_makes_the_modes_indistinguishable() {
    let mut cfg = ExperimentConfig::load(&config_path("benchmark.toml")).unwrap();
    cfg.data.domain_shift_strength = 0.0;
    cfg.seeds = (0..10).collect();
    let (table, _) = experiment::run_ablation(&cfg).unwrap();
    for a in AblationMode::ALL {
        for b in AblationMode::ALL {
            let (ra, rb) = (table.row(a).unwrap(), table.row(b).unwrap());
            // the ±1 s.e. intervals must overlap
            let reach = ra.rank1_se + rb.rank1_se;
            assert!(
                (ra.rank1 - rb.rank1).abs() <= reach,
                "{a} {:.2} vs {b} {:.2} (s.e. sum {:.2})",
                ra.rank1,
                rb.rank1,
                reach
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Graph and memory invariants
// ---------------------------------------------------------------------------

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    quantized_unit_rows(rows, dim, 1000, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_lists_are_well_formed(v in 1usize..40, k in 0usize..50, seed in any::<u64>()) {
        let x = unit_rows(v, 3, seed);
        let (lists, eff) = knn_lists(&x, k).unwrap();
        prop_assert_eq!(eff, k.min(v - 1));
        for (j, ns) in lists.iter().enumerate() {
            prop_assert_eq!(ns.len(), eff);
            prop_assert!(!ns.contains(&j));
            let mut sorted = ns.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), ns.len());
        }
    }

    #[test]
    fn graph_clamps_large_k(b in 1usize..6, s in 0usize..6, t in 0usize..6, seed in any::<u64>()) {
        prop_assume!(b + s + t >= 2);
        let x = unit_rows(b + s + t, 4, seed);
        let input = FeatureBatch::new(x.slice_rows(0, b), FeatureRole::TargetText, Provenance::Student).unwrap();
        let g = build_graph(&input, &x.slice_rows(b, b + s), &x.slice_rows(b + s, b + s + t), 100).unwrap();
        prop_assert!(g.was_clamped());
        prop_assert_eq!(g.k(), b + s + t - 1);
        prop_assert_eq!(g.partition().total(), b + s + t);
    }

    #[test]
    fn bank_matches_a_bounded_queue(cap in 1usize..20, pushes in 0usize..80, seed in any::<u64>()) {
        let rows = unit_rows(pushes.max(1), 3, seed);
        let mut bank = MemoryBank::new(Domain::Source, Modality::Image, cap, 3).unwrap();
        let mut oracle = QueueOracle::new(cap);
        for i in 0..pushes {
            bank.push(rows.row(i), i as u64).unwrap();
            oracle.push(rows.row(i).to_vec());
        }
        prop_assert_eq!(bank.len(), pushes.min(cap));
        let got: Vec<Vec<f64>> = bank.entries().map(|e| e.embedding.clone()).collect();
        prop_assert_eq!(got, oracle.items.iter().cloned().collect::<Vec<_>>());
    }
}

// ---------------------------------------------------------------------------
// Evaluator invariants
// ---------------------------------------------------------------------------

fn random_index(n_g: usize, n_q: usize, n_ids: u32, seed: u64) -> (Matrix, Vec<u32>, Matrix, Vec<u32>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gallery = quantized_unit_rows(n_g, 4, 1000, &mut rng);
    let queries = quantized_unit_rows(n_q, 4, 1000, &mut rng);
    let gids: Vec<u32> = (0..n_g).map(|_| rng.random_range(0..n_ids)).collect();
    let mut qids: Vec<u32> = (0..n_q).map(|_| rng.random_range(0..n_ids)).collect();
    qids[0] = gids[0];
    (gallery, gids, queries, qids)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_gallery_order(n_g in 1usize..30, n_q in 1usize..10, ids in 1u32..6, seed in any::<u64>(), rot in 0usize..30) {
        let (g, gids, q, qids) = random_index(n_g, n_q, ids, seed);
        let base = evaluate(&RetrievalIndex::new(g.clone(), gids.clone(), q.clone(), qids.clone()).unwrap(), &[]).unwrap();
        // rotate the gallery; continuous coordinates make ties vanishingly rare
        let perm: Vec<usize> = (0..n_g).map(|i| (i + rot) % n_g).collect();
        let g2 = g.select_rows(&perm);
        let gids2: Vec<u32> = perm.iter().map(|&i| gids[i]).collect();
        let moved = evaluate(&RetrievalIndex::new(g2, gids2, q, qids).unwrap(), &[]).unwrap();
        prop_assert_eq!(base.rank1, moved.rank1);
        prop_assert!((base.map - moved.map).abs() < 1e-9);
    }

    #[test]
    fn rank_k_is_monotone(n_g in 1usize..30, n_q in 1usize..10, ids in 1u32..6, seed in any::<u64>()) {
        let (g, gids, q, qids) = random_index(n_g, n_q, ids, seed);
        let ks: Vec<usize> = (1..=31).collect();
        let r = evaluate(&RetrievalIndex::new(g, gids, q, qids).unwrap(), &ks).unwrap();
        prop_assert!(r.rank_k.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(r.rank_k.last().unwrap().1, 100.0);
        prop_assert!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10);
        prop_assert!(r.per_query_ap.iter().all(|&ap| ap > 0.0 && ap <= 1.0));
    }

    #[test]
    fn full_map_exactly_when_every_ranking_is_perfect(n_g in 1usize..20, n_q in 1usize..8, ids in 1u32..4, seed in any::<u64>()) {
        let (g, gids, q, qids) = random_index(n_g, n_q, ids, seed);
        let reference = retrieval_reference(&g, &gids, &q, &qids, &[1]);
        let perfect = reference.ap.iter().all(|&ap| ap == 1.0);
        let r = evaluate(&RetrievalIndex::new(g, gids, q, qids).unwrap(), &[]).unwrap();
        prop_assert_eq!(r.map == 100.0, perfect);
    }
}

#[test]
fn identity_aligned_embeddings_score_perfectly() {
    // each identity owns one axis; every query and gallery item sits on it
    let axis = |i: usize| l2_normalize(&(0..5).map(|k| if k == i { 1.0 } else { 0.01 }).collect::<Vec<_>>()).unwrap();
    let gids: Vec<u32> = vec![0, 1, 2, 3, 4, 0, 1, 2];
    let g: Vec<Vec<f64>> = gids.iter().map(|&i| axis(i as usize)).collect();
    let qids: Vec<u32> = vec![4, 3, 2, 1, 0];
    let q: Vec<Vec<f64>> = qids.iter().map(|&i| axis(i as usize)).collect();
    let index = RetrievalIndex::new(Matrix::from_rows(&g, 5).unwrap(), gids, Matrix::from_rows(&q, 5).unwrap(), qids).unwrap();
    let r = evaluate(&index, &[]).unwrap();
    assert_eq!((r.rank1, r.map), (100.0, 100.0));
}

#[test]
fn encoders_are_deterministic_in_the_seed() {
    let dims = gckd::encoder::EncoderDims::new(6, 4);
    assert_eq!(EncoderParams::init(5, dims).unwrap(), EncoderParams::init(5, dims).unwrap());
    assert_ne!(EncoderParams::init(5, dims).unwrap(), EncoderParams::init(6, dims).unwrap());
}
