//! Cross-domain contrastive loss over the target queues, the binary matching
//! loss with thresholded positives and cross-domain hard negatives, and the
//! weighted objective. Each loss returns its value together with gradients
//! with respect to the features it consumed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distillation::PseudoTargets;
use crate::encoder::{FeatureBatch, FeatureRole, Mlp, MlpCache, Provenance};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, log_softmax_temp, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    /// Teacher similarity a queue text must exceed to count as a positive.
    pub delta: f64,
    pub lambda_itc: f64,
    pub lambda_itm: f64,
    pub lambda_aux: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            delta: 0.8,
            lambda_itc: 0.5,
            lambda_itm: 0.5,
            lambda_aux: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.delta > -1.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (-1, 1), got {}", self.delta)));
        }
        for (name, v) in [
            ("lambda_itc", self.lambda_itc),
            ("lambda_itm", self.lambda_itm),
            ("lambda_aux", self.lambda_aux),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Index of the "match" logit; index 0 is "no match".
pub const MATCH: usize = 1;

/// Binary classifier over concatenated `[image ; text]` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingHead {
    pub mlp: Mlp,
}

impl MatchingHead {
    /// `2D → D → 2`.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::init(&[2 * dim, dim, 2], rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mlp.d_in() / 2
    }

    pub fn logits(&self, image: &[f64], text: &[f64]) -> Result<[f64; 2]> {
        let x = Matrix::new(1, image.len() + text.len(), [image, text].concat())?;
        let y = self.mlp.forward(&x)?;
        Ok([y.get(0, 0), y.get(0, 1)])
    }
}

// ---------------------------------------------------------------------------
// Contrastive term
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastLoss {
    /// Mean over all rows of both active directions; `None` if both skipped.
    pub value: Option<f64>,
    pub i2t: Option<f64>,
    pub t2i: Option<f64>,
    pub grad_img: Matrix,
    pub grad_txt: Matrix,
}

/// Soft-target cross-entropy of `features · queueᵀ / τ` against `targets`.
/// Returns per-row losses and `dℓ_i/df_i` (unscaled).
fn soft_cross_entropy(
    features: &Matrix,
    queue: &Matrix,
    targets: &Matrix,
    tau: f64,
) -> Result<(Vec<f64>, Matrix)> {
    let sims = features.matmul_t(queue)?;
    let mut losses = Vec::with_capacity(features.rows());
    let mut dlogits = Matrix::zeros(sims.rows(), sims.cols());
    for i in 0..sims.rows() {
        let logp = log_softmax_temp(sims.row(i), tau)?;
        let s = targets.row(i);
        let mass: f64 = s.iter().sum();
        losses.push(-s.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>());
        for ((d, lp), sv) in dlogits.row_mut(i).iter_mut().zip(&logp).zip(s) {
            *d = (mass * lp.exp() - sv) / tau;
        }
    }
    Ok((losses, dlogits.matmul(queue)?))
}

fn check_alignment(name: &str, feats: &Matrix, targets: &Matrix, queue: &Matrix) -> Result<()> {
    if targets.rows() != feats.rows() || targets.cols() != queue.rows() {
        return Err(Error::Usage(format!(
            "{name} targets are {}x{} but there are {} features and {} queue entries",
            targets.rows(),
            targets.cols(),
            feats.rows(),
            queue.rows()
        )));
    }
    if queue.cols() != feats.cols() {
        return Err(shape_err!("{name} queue width {} vs feature width {}", queue.cols(), feats.cols()));
    }
    Ok(())
}

/// Cross-domain image-text contrast.
///
/// Each target image is scored against the whole target-text queue and its
/// queue distribution is pulled toward the teacher's `s_i2t` row; texts work
/// the same way against the image queue. Queues and targets are constants.
pub fn cd_itc(
    student_img: &FeatureBatch,
    student_txt: &FeatureBatch,
    targets: &PseudoTargets,
    q_tt: &Matrix,
    q_ti: &Matrix,
) -> Result<ContrastLoss> {
    for (b, role) in [
        (student_img, FeatureRole::TargetImage),
        (student_txt, FeatureRole::TargetText),
    ] {
        if b.role() != role || b.provenance() != Provenance::Student {
            return Err(Error::Usage(format!("expected student {role:?} features, got {:?}", b.role())));
        }
    }
    let (fi, ft) = (student_img.features(), student_txt.features());
    let mut grad_img = Matrix::zeros(fi.rows(), fi.cols());
    let mut grad_txt = Matrix::zeros(ft.rows(), ft.cols());

    let run = |name: &str, f: &Matrix, q: &Matrix, t: Option<&Matrix>| -> Result<Option<(f64, usize, Matrix)>> {
        let Some(t) = t else { return Ok(None) };
        if q.rows() == 0 || f.rows() == 0 {
            return Ok(None);
        }
        check_alignment(name, f, t, q)?;
        let (losses, grad) = soft_cross_entropy(f, q, t, targets.tau)?;
        Ok(Some((losses.iter().sum(), losses.len(), grad)))
    };
    let i2t = run("i2t", fi, q_tt, targets.i2t.as_ref())?;
    let t2i = run("t2i", ft, q_ti, targets.t2i.as_ref())?;

    let rows = i2t.as_ref().map_or(0, |r| r.1) + t2i.as_ref().map_or(0, |r| r.1);
    if rows == 0 {
        return Ok(ContrastLoss {
            value: None,
            i2t: None,
            t2i: None,
            grad_img,
            grad_txt,
        });
    }
    let scale = 1.0 / rows as f64;
    let mut total = 0.0;
    let mut direction = |r: Option<(f64, usize, Matrix)>, grad: &mut Matrix| -> Option<f64> {
        r.map(|(sum, n, mut g)| {
            total += sum;
            g.scale(scale);
            *grad = g;
            sum / n as f64
        })
    };
    let i2t_mean = direction(i2t, &mut grad_img);
    let t2i_mean = direction(t2i, &mut grad_txt);
    Ok(ContrastLoss {
        value: Some(total * scale),
        i2t: i2t_mean,
        t2i: t2i_mean,
        grad_img,
        grad_txt,
    })
}

// ---------------------------------------------------------------------------
// Pair selection
// ---------------------------------------------------------------------------

/// All `(image, queue entry)` pairs whose teacher similarity exceeds `delta`.
/// Both inputs are unit-norm, so the similarity is a dot product.
pub fn select_positives(teacher_img: &Matrix, q_tt: &Matrix, delta: f64) -> Result<Vec<(usize, usize)>> {
    if q_tt.rows() == 0 {
        return Ok(Vec::new());
    }
    let sims = teacher_img.matmul_t(q_tt)?;
    let mut out = Vec::new();
    for i in 0..sims.rows() {
        for (j, &s) in sims.row(i).iter().enumerate() {
            if s > delta {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// Positive-pair counts over a grid of thresholds.
pub fn positive_count_sweep(teacher_img: &Matrix, q_tt: &Matrix, deltas: &[f64]) -> Result<Vec<(f64, usize)>> {
    deltas
        .iter()
        .map(|&d| Ok((d, select_positives(teacher_img, q_tt, d)?.len())))
        .collect()
}

/// For every target image, the most similar source text (ties → lowest
/// index). `None` when there are no source texts.
pub fn mine_hard_negatives(images: &Matrix, source_texts: &Matrix) -> Result<Option<Vec<(usize, usize)>>> {
    if source_texts.rows() == 0 {
        return Ok(None);
    }
    if images.cols() != source_texts.cols() && images.rows() > 0 {
        return Err(shape_err!("image width {} vs text width {}", images.cols(), source_texts.cols()));
    }
    let pairs = images
        .row_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, t) in source_texts.row_iter().enumerate() {
                let s = dot(f, t);
                if s > best.0 {
                    best = (s, j);
                }
            }
            (i, best.1)
        })
        .collect();
    Ok(Some(pairs))
}

// ---------------------------------------------------------------------------
// Matching term
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MatchLoss {
    /// Mean over all pairs; `None` when there were no pairs.
    pub value: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub grad_head: MatchingHead,
    pub grad_images: Matrix,
    /// Gradient for the negative-side texts. Positive-side texts come from the
    /// queue and receive none.
    pub grad_neg_texts: Matrix,
}

struct PairBatch {
    input: Matrix,
    labels: Vec<usize>,
}

fn assemble_pairs(
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    images: &Matrix,
    pos_texts: &Matrix,
    neg_texts: &Matrix,
) -> Result<PairBatch> {
    let d = images.cols();
    let n = positives.len() + negatives.len();
    let mut data = Vec::with_capacity(n * 2 * d);
    let mut labels = Vec::with_capacity(n);
    for (pairs, texts, label) in [(positives, pos_texts, MATCH), (negatives, neg_texts, 1 - MATCH)] {
        for &(i, j) in pairs {
            if i >= images.rows() || j >= texts.rows() {
                return Err(Error::Usage(format!("pair ({i}, {j}) out of range")));
            }
            if texts.cols() != d {
                return Err(shape_err!("text width {} vs image width {d}", texts.cols()));
            }
            data.extend_from_slice(images.row(i));
            data.extend_from_slice(texts.row(j));
            labels.push(label);
        }
    }
    Ok(PairBatch {
        input: Matrix::new(n, 2 * d, data)?,
        labels,
    })
}

/// Binary matching loss: positives should be classified as matches and hard
/// negatives as non-matches.
pub fn cd_itm(
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    head: &MatchingHead,
    images: &Matrix,
    pos_texts: &Matrix,
    neg_texts: &Matrix,
) -> Result<MatchLoss> {
    let d = images.cols();
    let mut out = MatchLoss {
        value: None,
        positives: positives.len(),
        negatives: negatives.len(),
        grad_head: MatchingHead {
            mlp: head.mlp.zeros_like(),
        },
        grad_images: Matrix::zeros(images.rows(), d),
        grad_neg_texts: Matrix::zeros(neg_texts.rows(), neg_texts.cols()),
    };
    let n = positives.len() + negatives.len();
    if n == 0 {
        return Ok(out);
    }
    if head.dim() != d {
        return Err(shape_err!("head expects width {}, features have {d}", head.dim()));
    }
    let pairs = assemble_pairs(positives, negatives, images, pos_texts, neg_texts)?;
    let (logits, cache): (Matrix, MlpCache) = head.mlp.forward_cached(&pairs.input)?;
    let mut total = 0.0;
    let mut dlogits = Matrix::zeros(n, 2);
    for (r, &label) in pairs.labels.iter().enumerate() {
        let logp = log_softmax_temp(logits.row(r), 1.0)?;
        total -= logp[label];
        for (c, lp) in logp.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            dlogits.set(r, c, (lp.exp() - onehot) / n as f64);
        }
    }
    let dinput = head.mlp.backward(&cache, &dlogits, &mut out.grad_head.mlp)?;
    for (r, &(i, _)) in positives.iter().chain(negatives).enumerate() {
        for (g, v) in out.grad_images.row_mut(i).iter_mut().zip(&dinput.row(r)[..d]) {
            *g += v;
        }
    }
    for (r, &(_, j)) in negatives.iter().enumerate() {
        let row = &dinput.row(positives.len() + r)[d..];
        for (g, v) in out.grad_neg_texts.row_mut(j).iter_mut().zip(row) {
            *g += v;
        }
    }
    out.value = Some(total / n as f64);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Per-term values of one step; `None` marks a skipped term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub cd_itc: Option<f64>,
    pub cd_itm: Option<f64>,
    pub aux: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub cd_itc: f64,
    pub cd_itm: f64,
    pub aux: f64,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
    pub skipped: Vec<String>,
}

/// Weighted sum `λ1·cd_itc + λ2·cd_itm + λ3·aux`; skipped terms count as zero.
pub fn total(parts: LossParts, cfg: &LossConfig) -> Result<LossReport> {
    for (name, v) in [
        ("lambda_itc", cfg.lambda_itc),
        ("lambda_itm", cfg.lambda_itm),
        ("lambda_aux", cfg.lambda_aux),
    ] {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
        }
    }
    let mut skipped = Vec::new();
    let mut take = |name: &str, v: Option<f64>| {
        v.unwrap_or_else(|| {
            skipped.push(name.to_owned());
            0.0
        })
    };
    let cd_itc = take("cd_itc", parts.cd_itc);
    let cd_itm = take("cd_itm", parts.cd_itm);
    let aux = parts.aux.unwrap_or(0.0);
    Ok(LossReport {
        iteration: 0,
        cd_itc,
        cd_itm,
        aux,
        total: cfg.lambda_itc * cd_itc + cfg.lambda_itm * cd_itm + cfg.lambda_aux * aux,
        positives: parts.positives,
        negatives: parts.negatives,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distillation::queue_distribution;
    use crate::numerics::{cosine_sim, entropy, l2_normalize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: &[Vec<f64>]) -> Matrix {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r).unwrap()).collect();
        Matrix::from_rows(&rows, rows[0].len()).unwrap()
    }

    fn student(m: Matrix, role: FeatureRole) -> FeatureBatch {
        FeatureBatch::new(m, role, Provenance::Student).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        unit_rows(&rows)
    }

    #[test]
    fn singleton_queue_gives_zero() {
        let q = unit_rows(&[vec![0.3, 0.4]]);
        let img = student(unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), FeatureRole::TargetImage);
        let txt = student(unit_rows(&[vec![1.0, 1.0]]), FeatureRole::TargetText);
        let targets = PseudoTargets {
            i2t: Some(Matrix::new(2, 1, vec![1.0, 1.0]).unwrap()),
            t2i: Some(Matrix::new(1, 1, vec![1.0]).unwrap()),
            tau: 0.07,
        };
        let l = cd_itc(&img, &txt, &targets, &q, &q).unwrap();
        assert!(l.value.unwrap().abs() < 1e-12);
        assert!(l.grad_img.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn uniform_case_is_log_n() {
        let n = 5;
        // every queue row identical ⇒ uniform student logits
        let q = unit_rows(&vec![vec![0.2, -0.9, 0.4]; n]);
        let img = student(unit_rows(&[vec![1.0, 2.0, 3.0]]), FeatureRole::TargetImage);
        let txt = student(unit_rows(&[vec![-1.0, 0.5, 0.0]]), FeatureRole::TargetText);
        let uniform = Matrix::new(1, n, vec![1.0 / n as f64; n]).unwrap();
        let targets = PseudoTargets {
            i2t: Some(uniform.clone()),
            t2i: Some(uniform),
            tau: 0.07,
        };
        let l = cd_itc(&img, &txt, &targets, &q, &q).unwrap();
        let ln = (n as f64).ln();
        assert!((l.value.unwrap() - ln).abs() < 1e-9);
        assert!((l.i2t.unwrap() - ln).abs() < 1e-9);
        assert!((l.t2i.unwrap() - ln).abs() < 1e-9);
    }

    #[test]
    fn misaligned_targets_rejected() {
        let q = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let img = student(unit_rows(&[vec![1.0, 0.0]]), FeatureRole::TargetImage);
        let txt = student(unit_rows(&[vec![1.0, 0.0]]), FeatureRole::TargetText);
        let targets = PseudoTargets {
            i2t: Some(Matrix::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap()),
            t2i: None,
            tau: 0.07,
        };
        assert!(matches!(cd_itc(&img, &txt, &targets, &q, &q), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_queues_skip() {
        let img = student(unit_rows(&[vec![1.0, 0.0]]), FeatureRole::TargetImage);
        let txt = student(unit_rows(&[vec![1.0, 0.0]]), FeatureRole::TargetText);
        let targets = PseudoTargets {
            i2t: None,
            t2i: None,
            tau: 0.07,
        };
        let e = Matrix::zeros(0, 2);
        assert_eq!(cd_itc(&img, &txt, &targets, &e, &e).unwrap().value, None);
    }

    /// Values frozen from a 50-digit mpmath recomputation of the same inputs.
    #[test]
    fn random_case_matches_extended_precision() {
        let img = student(unit_rows(&[vec![0.3, -0.7, 0.2], vec![0.9, 0.1, -0.4]]), FeatureRole::TargetImage);
        let txt = student(unit_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.1]]), FeatureRole::TargetText);
        let q_tt = unit_rows(&[vec![0.5, -0.5, 0.1], vec![0.2, 0.8, -0.3], vec![-0.6, -0.1, 0.7]]);
        let q_ti = unit_rows(&[vec![0.4, 0.4, 0.2], vec![-0.3, 0.9, 0.1], vec![0.7, -0.2, -0.6]]);
        let targets = PseudoTargets {
            i2t: Some(Matrix::new(2, 3, vec![0.5, 0.3, 0.2, 0.1, 0.1, 0.8]).unwrap()),
            t2i: Some(Matrix::new(2, 3, vec![0.6, 0.2, 0.2, 0.25, 0.5, 0.25]).unwrap()),
            tau: 0.07,
        };
        let l = cd_itc(&img, &txt, &targets, &q_tt, &q_ti).unwrap();
        assert!((l.value.unwrap() - REF_ITC).abs() < 1e-10 * REF_ITC, "{}", l.value.unwrap());
    }

    const REF_ITC: f64 = 9.9864492492754170942;

    proptest::proptest! {
        #[test]
        fn gibbs_bound(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, c, d) = (3, 6, 4);
            let img = random_unit(&mut rng, b, d);
            let txt = random_unit(&mut rng, b, d);
            let q_tt = random_unit(&mut rng, c, d);
            let q_ti = random_unit(&mut rng, c, d);
            let t_img = random_unit(&mut rng, b, d);
            let t_txt = random_unit(&mut rng, b, d);
            let i2t = queue_distribution(&t_img, &q_tt, 0.07).unwrap();
            let t2i = queue_distribution(&t_txt, &q_ti, 0.07).unwrap();
            let h = (i2t.row_iter().chain(t2i.row_iter()).map(entropy).sum::<f64>()) / (2 * b) as f64;
            let targets = PseudoTargets { i2t: Some(i2t), t2i: Some(t2i), tau: 0.07 };
            let l = cd_itc(&student(img, FeatureRole::TargetImage), &student(txt, FeatureRole::TargetText), &targets, &q_tt, &q_ti).unwrap();
            proptest::prop_assert!(l.value.unwrap() >= h - 1e-12);
        }
    }

    #[test]
    fn minimized_when_student_matches_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let img = random_unit(&mut rng, 3, 4);
        let txt = random_unit(&mut rng, 3, 4);
        let q = random_unit(&mut rng, 5, 4);
        let i2t = queue_distribution(&img, &q, 0.07).unwrap();
        let t2i = queue_distribution(&txt, &q, 0.07).unwrap();
        let h = (i2t.row_iter().chain(t2i.row_iter()).map(entropy).sum::<f64>()) / 6.0;
        let targets = PseudoTargets {
            i2t: Some(i2t),
            t2i: Some(t2i),
            tau: 0.07,
        };
        let l = cd_itc(&student(img, FeatureRole::TargetImage), &student(txt, FeatureRole::TargetText), &targets, &q, &q).unwrap();
        assert!((l.value.unwrap() - h).abs() < 1e-12);
        assert!(l.grad_img.data().iter().chain(l.grad_txt.data()).all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn itc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_unit(&mut rng, 2, 3);
        let txt = random_unit(&mut rng, 2, 3);
        let q_tt = random_unit(&mut rng, 4, 3);
        let q_ti = random_unit(&mut rng, 4, 3);
        let targets = PseudoTargets {
            i2t: Some(queue_distribution(&random_unit(&mut rng, 2, 3), &q_tt, 0.5).unwrap()),
            t2i: Some(queue_distribution(&random_unit(&mut rng, 2, 3), &q_ti, 0.5).unwrap()),
            tau: 0.07,
        };
        // raw (unnormalized) evaluation so perturbations need not stay on the sphere
        let value = |fi: &Matrix, ft: &Matrix| {
            let (a, _) = soft_cross_entropy(fi, &q_tt, targets.i2t.as_ref().unwrap(), 0.07).unwrap();
            let (b, _) = soft_cross_entropy(ft, &q_ti, targets.t2i.as_ref().unwrap(), 0.07).unwrap();
            (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / 4.0
        };
        let l = cd_itc(&student(img.clone(), FeatureRole::TargetImage), &student(txt.clone(), FeatureRole::TargetText), &targets, &q_tt, &q_ti).unwrap();
        let h = 1e-6;
        for k in 0..img.data().len() {
            let (mut p, mut m) = (img.clone(), img.clone());
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let fd = (value(&p, &txt) - value(&m, &txt)) / (2.0 * h);
            assert!((fd - l.grad_img.data()[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn positives_threshold() {
        let q = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let img = unit_rows(&[vec![1.0, 1.0, 1.0]]);
        assert!(select_positives(&img, &q, 0.99).unwrap().is_empty());
        let same = unit_rows(&[vec![0.3, 0.4, 0.5]]);
        assert_eq!(select_positives(&same, &same, 0.5).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn positives_match_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = random_unit(&mut rng, 3, 5);
        let q = random_unit(&mut rng, 4, 5);
        let mut expected = Vec::new();
        for i in 0..3 {
            for j in 0..4 {
                if cosine_sim(img.row(i), q.row(j)).unwrap() > 0.3 {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(select_positives(&img, &q, 0.3).unwrap(), expected);
        let sweep = positive_count_sweep(&img, &q, &[-1.0, 0.3, 1.0]).unwrap();
        assert_eq!(sweep, vec![(-1.0, 12), (0.3, expected.len()), (1.0, 0)]);
    }

    #[test]
    fn hard_negative_examples() {
        let img = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let one = unit_rows(&[vec![-1.0, 0.2]]);
        assert_eq!(mine_hard_negatives(&img, &one).unwrap().unwrap(), vec![(0, 0), (1, 0)]);
        let texts = unit_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert_eq!(mine_hard_negatives(&img, &texts).unwrap().unwrap(), vec![(0, 1), (1, 0)]);
        assert_eq!(mine_hard_negatives(&img, &Matrix::zeros(0, 2)).unwrap(), None);
        // ties go to the lowest index
        let tied = unit_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(mine_hard_negatives(&img, &tied).unwrap().unwrap(), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn hard_negatives_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_unit(&mut rng, 4, 6);
        let txt = random_unit(&mut rng, 4, 6);
        let got = mine_hard_negatives(&img, &txt).unwrap().unwrap();
        for (i, j) in got {
            let best = (0..4)
                .map(|k| cosine_sim(img.row(i), txt.row(k)).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((cosine_sim(img.row(i), txt.row(j)).unwrap() - best).abs() < 1e-15);
        }
    }

    fn head_with_output(logits: [f64; 2], d: usize) -> MatchingHead {
        use crate::encoder::Dense;
        let mut l1 = Dense::zeros(2 * d, d);
        l1.bias.fill(0.0);
        let mut l2 = Dense::zeros(d, 2);
        l2.bias = logits.to_vec();
        MatchingHead {
            mlp: Mlp { layers: vec![l1, l2] },
        }
    }

    #[test]
    fn itm_equal_logits_is_log2() {
        let img = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = unit_rows(&[vec![1.0, 1.0]]);
        let head = head_with_output([0.3, 0.3], 2);
        let l = cd_itm(&[(0, 0), (1, 0)], &[(0, 0)], &head, &img, &q, &q).unwrap();
        assert!((l.value.unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn itm_saturated_correct_is_zero() {
        let img = unit_rows(&[vec![1.0, 0.0]]);
        let q = unit_rows(&[vec![1.0, 1.0]]);
        let head = head_with_output([-40.0, 40.0], 2);
        let l = cd_itm(&[(0, 0)], &[], &head, &img, &q, &q).unwrap();
        assert!(l.value.unwrap() < 1e-30);
    }

    #[test]
    fn itm_skips_without_pairs() {
        let img = unit_rows(&[vec![1.0, 0.0]]);
        let head = head_with_output([0.0, 0.0], 2);
        assert_eq!(cd_itm(&[], &[], &head, &img, &img, &img).unwrap().value, None);
    }

    /// Independent binary cross-entropy: match probability via the logistic
    /// of the logit difference.
    #[test]
    fn itm_matches_binary_cross_entropy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 3;
        let head = MatchingHead::init(d, &mut rng).unwrap();
        let img = random_unit(&mut rng, 2, d);
        let q = random_unit(&mut rng, 3, d);
        let src = random_unit(&mut rng, 2, d);
        let pos = [(0, 2), (1, 0)];
        let neg = [(0, 1), (1, 1)];
        let l = cd_itm(&pos, &neg, &head, &img, &q, &src).unwrap();
        let mut bce = 0.0;
        for (&(i, j), texts, y) in pos.iter().map(|p| (p, &q, 1.0)).chain(neg.iter().map(|p| (p, &src, 0.0))) {
            let z = head.logits(img.row(i), texts.row(j)).unwrap();
            let p = 1.0 / (1.0 + (z[0] - z[1]).exp());
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        assert!((l.value.unwrap() - bce / 4.0).abs() < 1e-12);
    }

    #[test]
    fn totals() {
        let cfg = LossConfig::default();
        let parts = LossParts {
            cd_itc: Some(1.0),
            cd_itm: Some(2.0),
            aux: Some(0.0),
            ..Default::default()
        };
        assert!((total(parts, &cfg).unwrap().total - 1.5).abs() < 1e-15);
        assert_eq!(total(LossParts::default(), &cfg).unwrap().total, 0.0);
        let only_itc = LossConfig {
            lambda_itc: 1.0,
            lambda_itm: 0.0,
            lambda_aux: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total(parts, &only_itc).unwrap().total, 1.0);
        let bad = LossConfig {
            lambda_itm: -0.1,
            ..cfg
        };
        assert!(matches!(total(parts, &bad), Err(Error::Config(_))));
        let r = total(LossParts { cd_itc: None, ..parts }, &LossConfig::default()).unwrap();
        assert_eq!(r.skipped, vec!["cd_itc".to_owned()]);
    }
}
