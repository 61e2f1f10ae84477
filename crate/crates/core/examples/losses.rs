//! Evaluates both adaptation losses on hand-made features.
//!
//! `cd_itc` compares the student's queue distribution to the teacher's and is
//! bounded below by the entropy of the teacher targets. `cd_itm` classifies
//! (image, text) pairs; the pairs are chosen with `select_positives` and
//! `mine_hard_negatives`.

use gckd::distillation::pseudo_targets;
use gckd::encoder::{FeatureBatch, FeatureRole, Provenance};
use gckd::losses::{cd_itc, cd_itm, mine_hard_negatives, select_positives, MatchingHead};
use gckd::numerics::{entropy, l2_normalize, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(v: &[[f64; 3]]) -> gckd::Result<Matrix> {
    let unit: Vec<Vec<f64>> = v.iter().map(|r| l2_normalize(r)).collect::<gckd::Result<_>>()?;
    Matrix::from_rows(&unit, 3)
}

fn main() -> gckd::Result<()> {
    let tau = 0.07;
    let teacher_img = rows(&[[1.0, 0.1, 0.0], [0.0, 1.0, 0.2]])?;
    let teacher_txt = rows(&[[0.9, 0.2, 0.1], [0.1, 1.0, 0.0]])?;
    let student_img = rows(&[[1.0, 0.3, 0.1], [0.2, 1.0, 0.3]])?;
    let student_txt = rows(&[[1.0, 0.0, 0.3], [0.0, 1.0, 0.1]])?;
    let q_ti = rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])?;
    let q_tt = rows(&[[1.0, 0.1, 0.0], [0.1, 1.0, 0.0], [0.0, 0.1, 1.0]])?;
    let source_txt = rows(&[[0.8, 0.5, 0.0], [0.3, 0.9, 0.0], [0.0, 0.0, 1.0]])?;

    let targets = pseudo_targets(
        &FeatureBatch::new(teacher_img.clone(), FeatureRole::PseudoTargetImage, Provenance::Teacher)?,
        &FeatureBatch::new(teacher_txt, FeatureRole::PseudoTargetText, Provenance::Teacher)?,
        &q_tt,
        &q_ti,
        tau,
    )?;
    let itc = cd_itc(
        &FeatureBatch::new(student_img.clone(), FeatureRole::TargetImage, Provenance::Student)?,
        &FeatureBatch::new(student_txt, FeatureRole::TargetText, Provenance::Student)?,
        &targets,
        &q_tt,
        &q_ti,
    )?;
    let ents: Vec<f64> = [&targets.i2t, &targets.t2i]
        .into_iter()
        .flatten()
        .flat_map(|m| m.row_iter().map(entropy).collect::<Vec<_>>())
        .collect();
    println!(
        "cd_itc = {:.4}  (i2t {:.4}, t2i {:.4}; teacher entropy {:.4})",
        itc.value.unwrap_or(0.0),
        itc.i2t.unwrap_or(0.0),
        itc.t2i.unwrap_or(0.0),
        ents.iter().sum::<f64>() / ents.len() as f64
    );

    let positives = select_positives(&teacher_img, &q_tt, 0.8)?;
    let negatives = mine_hard_negatives(&student_img, &source_txt)?.unwrap_or_default();
    println!("positives {positives:?}, hard negatives {negatives:?}");
    let head = MatchingHead::init(3, &mut ChaCha8Rng::seed_from_u64(0))?;
    let itm = cd_itm(&positives, &negatives, &head, &student_img, &q_tt, &source_txt)?;
    println!("cd_itm = {:.4} over {} pairs", itm.value.unwrap_or(0.0), itm.positives + itm.negatives);
    Ok(())
}
