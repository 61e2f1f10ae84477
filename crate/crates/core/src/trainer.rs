//! Warm-up on labelled source pairs, then teacher-student adaptation on the
//! unlabelled target lists.
//!
//! Every adaptation step is split in two. [`make_plan`] fixes everything
//! discrete for the step (queue snapshots, teacher targets, graph neighbour
//! lists, positive and negative pairs). [`objective`] is then a smooth
//! function of the student parameters alone, which is what the gradient
//! check differentiates numerically.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distillation::{pseudo_targets, PseudoTargets, TeacherStudentPair};
use crate::encoder::{
    stack_raw, tower_backward, tower_forward, EncoderDims, FeatureBatch, FeatureRole, Provenance, TowerCache,
};
use crate::error::{Error, Result};
use crate::graph::{self, GnnCache};
use crate::losses::{self, LossConfig, LossParts, LossReport};
use crate::memory::MemoryBanks;
use crate::model::{ModelDims, ModelParams};
use crate::numerics::{log_softmax_temp, Matrix};
use crate::optim::{cosine_lr, AdamW};
use crate::synth_data::{batch_indices, Modality, SourcePair, TargetSet, UnlabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Warm-up only.
    Baseline,
    /// Distillation losses on raw student features.
    Cmkd,
    /// Distillation losses on graph-propagated features.
    CmkdGmp,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Baseline, AblationMode::Cmkd, AblationMode::CmkdGmp];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Cmkd => "cmkd",
            AblationMode::CmkdGmp => "cmkd_gmp",
        }
    }

    pub fn uses_graph(self) -> bool {
        self == AblationMode::CmkdGmp
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode {s:?}; expected baseline, cmkd or cmkd_gmp")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Neighbours per vertex.
    pub k: usize,
    pub layers: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 10, layers: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub capacity: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { capacity: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Adaptation epochs, counted over the target image list.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_batch_size: usize,
    pub warmup_lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
    pub graph: GraphConfig,
    pub memory: MemoryConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            batch_size: 4,
            lr: 1e-5,
            weight_decay: 0.01,
            epochs: 1,
            warmup_epochs: 5,
            warmup_batch_size: 32,
            warmup_lr: 1e-3,
            momentum: crate::distillation::DEFAULT_MOMENTUM,
            grad_clip: None,
            seed: 0,
            loss: LossConfig::default(),
            graph: GraphConfig::default(),
            memory: MemoryConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("batch_size", self.batch_size),
            ("warmup_batch_size", self.warmup_batch_size),
            ("graph.k", self.graph.k),
            ("graph.layers", self.graph.layers),
            ("memory.capacity", self.memory.capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.loss.validate()
    }

    pub fn model_dims(&self, d_raw: usize) -> ModelDims {
        ModelDims {
            encoder: EncoderDims::new(d_raw, self.embed_dim),
            gnn_layers: self.graph.layers,
        }
    }
}

/// Everything the trainer mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub(crate) pair: TeacherStudentPair,
    pub(crate) banks: MemoryBanks,
    pub(crate) optimizer: AdamW,
    /// Adaptation steps taken so far.
    pub(crate) iteration: u64,
    /// Length of the cosine schedule; zero means a constant rate.
    pub(crate) total_steps: u64,
    pub(crate) rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, d_raw: usize) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg.seed, cfg.model_dims(d_raw))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: AdamW::new(&params, cfg.weight_decay),
            banks: MemoryBanks::new(cfg.memory.capacity, cfg.embed_dim)?,
            pair: TeacherStudentPair::new(params, cfg.momentum)?,
            iteration: 0,
            total_steps: 0,
            rng,
        })
    }

    pub fn pair(&self) -> &TeacherStudentPair {
        &self.pair
    }

    pub fn student(&self) -> &ModelParams {
        self.pair.student()
    }

    pub fn teacher(&self) -> &ModelParams {
        self.pair.teacher()
    }

    pub fn banks(&self) -> &MemoryBanks {
        &self.banks
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn set_total_steps(&mut self, total: u64) {
        self.total_steps = total;
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

// ---------------------------------------------------------------------------
// Warm-up
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub phase: String,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Symmetric in-batch contrastive loss on paired source samples, with its
/// gradient for both towers.
pub fn warmup_objective(params: &ModelParams, pairs: &[&SourcePair], tau: f64) -> Result<(f64, ModelParams)> {
    let images: Vec<_> = pairs.iter().map(|p| &p.image).collect();
    let texts: Vec<_> = pairs.iter().map(|p| &p.text).collect();
    let (xi, _, _) = stack_raw(&images)?;
    let (xt, _, _) = stack_raw(&texts)?;
    let ci = tower_forward(params.encoders.tower(Modality::Image), &xi)?;
    let ct = tower_forward(params.encoders.tower(Modality::Text), &xt)?;
    let sims = ci.output().matmul_t(ct.output())?;
    let b = pairs.len();
    let half = 0.5 / b as f64;
    let mut loss = 0.0;
    let mut dsims = Matrix::zeros(b, b);
    for i in 0..b {
        let row = log_softmax_temp(sims.row(i), tau)?;
        let col: Vec<f64> = (0..b).map(|j| sims.get(j, i)).collect();
        let col = log_softmax_temp(&col, tau)?;
        loss -= half * (row[i] + col[i]);
        for j in 0..b {
            let eye = if i == j { 1.0 } else { 0.0 };
            let r = half * (row[j].exp() - eye) / tau;
            let c = half * (col[j].exp() - eye) / tau;
            dsims.set(i, j, dsims.get(i, j) + r);
            dsims.set(j, i, dsims.get(j, i) + c);
        }
    }
    let mut grads = params.zeros_like();
    let di = dsims.matmul(ct.output())?;
    let dt = dsims.t_matmul(ci.output())?;
    tower_backward(params.encoders.tower(Modality::Image), &ci, &di, grads.encoders.tower_mut(Modality::Image))?;
    tower_backward(params.encoders.tower(Modality::Text), &ct, &dt, grads.encoders.tower_mut(Modality::Text))?;
    Ok((loss, grads))
}

/// Trains the student on source pairs, then copies it into the teacher.
pub fn warmup(state: &mut TrainState, source: &[SourcePair], cfg: &TrainConfig) -> Result<Vec<WarmupReport>> {
    let mut reports = Vec::new();
    if cfg.warmup_epochs > 0 && !source.is_empty() {
        let per_epoch = source.len().div_ceil(cfg.warmup_batch_size) as u64;
        let total = per_epoch * cfg.warmup_epochs as u64;
        let mut opt = AdamW::new(state.pair.student(), cfg.weight_decay);
        let mut step = 0;
        for epoch in 0..cfg.warmup_epochs {
            let seed = state.rng.next_u64();
            for batch in batch_indices(source.len(), cfg.warmup_batch_size, seed)? {
                let pairs: Vec<&SourcePair> = batch.iter().map(|&i| &source[i]).collect();
                let (loss, grads) = warmup_objective(state.pair.student(), &pairs, cfg.loss.tau)?;
                let lr = cosine_lr(cfg.warmup_lr, step, total);
                opt.step(state.pair.student_mut(), &grads, lr, cfg.grad_clip)?;
                reports.push(WarmupReport {
                    phase: "warmup".into(),
                    step,
                    epoch,
                    loss,
                });
                step += 1;
            }
        }
    }
    state.pair.sync_teacher();
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Adaptation
// ---------------------------------------------------------------------------

/// Raw inputs of one adaptation step. Target rows carry no identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBatch {
    pub source_images: Matrix,
    pub source_texts: Matrix,
    pub target_images: Matrix,
    pub target_texts: Matrix,
}

impl RawBatch {
    pub fn new(source: &[&SourcePair], target_images: &[&UnlabeledSample], target_texts: &[&UnlabeledSample]) -> Result<Self> {
        if source.is_empty() || target_images.is_empty() || target_texts.is_empty() {
            return Err(Error::Usage("an adaptation step needs non-empty source and target batches".into()));
        }
        let si: Vec<_> = source.iter().map(|p| &p.image).collect();
        let st: Vec<_> = source.iter().map(|p| &p.text).collect();
        let batch = Self {
            source_images: stack_raw(&si)?.0,
            source_texts: stack_raw(&st)?.0,
            target_images: stack_raw(target_images)?.0,
            target_texts: stack_raw(target_texts)?.0,
        };
        if target_images.iter().any(|s| s.modality != Modality::Image)
            || target_texts.iter().any(|s| s.modality != Modality::Text)
        {
            return Err(Error::Usage("a target batch holds samples of the other modality".into()));
        }
        Ok(batch)
    }
}

/// Discrete decisions of one step, fixed before differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub mode: AblationMode,
    pub q_source_image: Matrix,
    pub q_source_text: Matrix,
    pub q_target_image: Matrix,
    pub q_target_text: Matrix,
    /// Teacher features of the target batches.
    pub teacher_images: FeatureBatch,
    pub teacher_texts: FeatureBatch,
    pub targets: PseudoTargets,
    /// Neighbour lists of the image and text graphs (graph mode only).
    pub image_neighbors: Option<Vec<Vec<usize>>>,
    pub text_neighbors: Option<Vec<Vec<usize>>>,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Student activations for one step.
#[derive(Debug, Clone)]
pub struct StudentForward {
    source_images: TowerCache,
    source_texts: TowerCache,
    target_images: TowerCache,
    target_texts: TowerCache,
    gmp_images: Option<GnnCache>,
    gmp_texts: Option<GnnCache>,
    /// Features the losses see: propagated in graph mode, raw otherwise.
    images: Matrix,
    texts: Matrix,
}

impl StudentForward {
    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn texts(&self) -> &Matrix {
        &self.texts
    }
}

fn propagate_inputs(
    params: &ModelParams,
    raw: &Matrix,
    src_mem: &Matrix,
    tgt_mem: &Matrix,
    neighbors: &[Vec<usize>],
) -> Result<GnnCache> {
    let x = Matrix::vstack(&[raw, src_mem, tgt_mem])?;
    graph::propagate_cached(&x, neighbors, &params.gnn)
}

pub fn student_forward(params: &ModelParams, raw: &RawBatch, plan: &StepPlan) -> Result<StudentForward> {
    let enc = &params.encoders;
    let source_images = tower_forward(enc.tower(Modality::Image), &raw.source_images)?;
    let source_texts = tower_forward(enc.tower(Modality::Text), &raw.source_texts)?;
    let target_images = tower_forward(enc.tower(Modality::Image), &raw.target_images)?;
    let target_texts = tower_forward(enc.tower(Modality::Text), &raw.target_texts)?;
    let (bi, bt) = (raw.target_images.rows(), raw.target_texts.rows());
    let (gmp_images, gmp_texts, images, texts) = match (&plan.image_neighbors, &plan.text_neighbors) {
        (Some(ni), Some(nt)) => {
            let gi = propagate_inputs(params, target_images.output(), &plan.q_source_image, &plan.q_target_image, ni)?;
            let gt = propagate_inputs(params, target_texts.output(), &plan.q_source_text, &plan.q_target_text, nt)?;
            let (i, t) = (gi.output().slice_rows(0, bi), gt.output().slice_rows(0, bt));
            (Some(gi), Some(gt), i, t)
        }
        _ => (None, None, target_images.output().clone(), target_texts.output().clone()),
    };
    Ok(StudentForward {
        source_images,
        source_texts,
        target_images,
        target_texts,
        gmp_images,
        gmp_texts,
        images,
        texts,
    })
}

fn teacher_batch(params: &ModelParams, x: &Matrix, modality: Modality) -> Result<FeatureBatch> {
    let out = tower_forward(params.encoders.tower(modality), x)?;
    FeatureBatch::new(
        out.output().clone(),
        FeatureRole::for_output(crate::synth_data::Domain::Target, modality, Provenance::Teacher),
        Provenance::Teacher,
    )
}

/// Fixes the step's discrete structure from the current teacher, student and
/// queues. Returns the plan together with the student forward it implies.
pub fn make_plan(
    state: &TrainState,
    raw: &RawBatch,
    cfg: &TrainConfig,
    mode: AblationMode,
) -> Result<(StepPlan, StudentForward)> {
    let teacher = state.pair.teacher();
    let student = state.pair.student();
    let teacher_images = teacher_batch(teacher, &raw.target_images, Modality::Image)?;
    let teacher_texts = teacher_batch(teacher, &raw.target_texts, Modality::Text)?;
    let b = &state.banks;
    let (q_si, q_st) = (b.source_image.snapshot(), b.source_text.snapshot());
    let (q_ti, q_tt) = (b.target_image.snapshot(), b.target_text.snapshot());
    let targets = pseudo_targets(&teacher_images, &teacher_texts, &q_tt, &q_ti, cfg.loss.tau)?;
    let positives = losses::select_positives(teacher_images.features(), &q_tt, cfg.loss.delta)?;

    let (image_neighbors, text_neighbors) = if mode.uses_graph() {
        let enc = &student.encoders;
        let lists = |modality, x: &Matrix, src: &Matrix, tgt: &Matrix| -> Result<Vec<Vec<usize>>> {
            let f = tower_forward(enc.tower(modality), x)?;
            let role = FeatureRole::for_output(crate::synth_data::Domain::Target, modality, Provenance::Student);
            let input = FeatureBatch::new(f.output().clone(), role, Provenance::Student)?;
            Ok(graph::build_graph(&input, src, tgt, cfg.graph.k)?.neighbors().to_vec())
        };
        (
            Some(lists(Modality::Image, &raw.target_images, &q_si, &q_ti)?),
            Some(lists(Modality::Text, &raw.target_texts, &q_st, &q_tt)?),
        )
    } else {
        (None, None)
    };

    let mut plan = StepPlan {
        mode,
        q_source_image: q_si,
        q_source_text: q_st,
        q_target_image: q_ti,
        q_target_text: q_tt,
        teacher_images,
        teacher_texts,
        targets,
        image_neighbors,
        text_neighbors,
        positives,
        negatives: Vec::new(),
    };
    let fwd = student_forward(student, raw, &plan)?;
    plan.negatives = losses::mine_hard_negatives(&fwd.images, fwd.source_texts.output())?.unwrap_or_default();
    Ok((plan, fwd))
}

/// Loss terms for a fixed plan, plus `∂(λ1·cd_itc + λ2·cd_itm)/∂θ`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub parts: LossParts,
    pub report: LossReport,
    pub grads: ModelParams,
}

fn backprop_graph(
    params: &ModelParams,
    cache: &GnnCache,
    neighbors: &[Vec<usize>],
    d_inputs: &Matrix,
    grads: &mut ModelParams,
) -> Result<Matrix> {
    let v = neighbors.len();
    let mut d_out = Matrix::zeros(v, d_inputs.cols());
    for i in 0..d_inputs.rows() {
        d_out.row_mut(i).copy_from_slice(d_inputs.row(i));
    }
    let dx = graph::propagate_backward(neighbors, &params.gnn, cache, &d_out, &mut grads.gnn)?;
    Ok(dx.slice_rows(0, d_inputs.rows()))
}

pub fn objective_from_forward(
    params: &ModelParams,
    fwd: &StudentForward,
    plan: &StepPlan,
    loss_cfg: &LossConfig,
) -> Result<Objective> {
    let img = FeatureBatch::new(fwd.images.clone(), FeatureRole::TargetImage, Provenance::Student)?;
    let txt = FeatureBatch::new(fwd.texts.clone(), FeatureRole::TargetText, Provenance::Student)?;
    let itc = losses::cd_itc(&img, &txt, &plan.targets, &plan.q_target_text, &plan.q_target_image)?;
    let itm = losses::cd_itm(
        &plan.positives,
        &plan.negatives,
        &params.head,
        &fwd.images,
        &plan.q_target_text,
        fwd.source_texts.output(),
    )?;
    let parts = LossParts {
        cd_itc: itc.value,
        cd_itm: itm.value,
        aux: None,
        positives: itm.positives,
        negatives: itm.negatives,
    };
    let report = losses::total(parts, loss_cfg)?;

    let (l1, l2) = (loss_cfg.lambda_itc, loss_cfg.lambda_itm);
    let mut grads = params.zeros_like();
    let mut d_img = itc.grad_img;
    d_img.scale(l1);
    let mut g = itm.grad_images;
    g.scale(l2);
    d_img.add_assign(&g)?;
    let mut d_txt = itc.grad_txt;
    d_txt.scale(l1);
    let mut d_src_txt = itm.grad_neg_texts;
    d_src_txt.scale(l2);
    for (gp, hp) in grads.head.mlp.layers.iter_mut().zip(&itm.grad_head.mlp.layers) {
        gp.weight = hp.weight.clone();
        gp.weight.scale(l2);
        gp.bias = hp.bias.iter().map(|v| l2 * v).collect();
    }

    if let (Some(ci), Some(ct), Some(ni), Some(nt)) =
        (&fwd.gmp_images, &fwd.gmp_texts, &plan.image_neighbors, &plan.text_neighbors)
    {
        d_img = backprop_graph(params, ci, ni, &d_img, &mut grads)?;
        d_txt = backprop_graph(params, ct, nt, &d_txt, &mut grads)?;
    }
    let enc = &params.encoders;
    tower_backward(enc.tower(Modality::Image), &fwd.target_images, &d_img, grads.encoders.tower_mut(Modality::Image))?;
    tower_backward(enc.tower(Modality::Text), &fwd.target_texts, &d_txt, grads.encoders.tower_mut(Modality::Text))?;
    tower_backward(enc.tower(Modality::Text), &fwd.source_texts, &d_src_txt, grads.encoders.tower_mut(Modality::Text))?;
    Ok(Objective { parts, report, grads })
}

/// The step objective as a function of `params` alone.
pub fn objective(params: &ModelParams, raw: &RawBatch, plan: &StepPlan, loss_cfg: &LossConfig) -> Result<Objective> {
    let fwd = student_forward(params, raw, plan)?;
    objective_from_forward(params, &fwd, plan, loss_cfg)
}

/// One adaptation step: plan, losses, optimizer step on the student, EMA
/// update of the teacher, then queue pushes (teacher target features and
/// student source features).
///
/// Target batches are [`UnlabeledSample`]s, which have no identity field.
pub fn adapt_step(
    state: &mut TrainState,
    source: &[&SourcePair],
    target_images: &[&UnlabeledSample],
    target_texts: &[&UnlabeledSample],
    cfg: &TrainConfig,
    mode: AblationMode,
) -> Result<LossReport> {
    let raw = RawBatch::new(source, target_images, target_texts)?;
    let (plan, fwd) = make_plan(state, &raw, cfg, mode)?;
    let Objective { mut report, grads, .. } = objective_from_forward(state.pair.student(), &fwd, &plan, &cfg.loss)?;
    report.iteration = state.iteration;

    let lr = cosine_lr(cfg.lr, state.iteration, state.total_steps);
    state.optimizer.step(state.pair.student_mut(), &grads, lr, cfg.grad_clip)?;
    state.pair.ema_update()?;

    let it = state.iteration;
    let banks = &mut state.banks;
    banks.target_image.push_batch(&plan.teacher_images, it)?;
    banks.target_text.push_batch(&plan.teacher_texts, it)?;
    let src = |cache: &TowerCache, role| FeatureBatch::new(cache.output().clone(), role, Provenance::Student);
    banks.source_image.push_batch(&src(&fwd.source_images, FeatureRole::SourceImage)?, it)?;
    banks.source_text.push_batch(&src(&fwd.source_texts, FeatureRole::SourceText)?, it)?;
    state.iteration += 1;
    Ok(report)
}

/// Runs the adaptation epochs. Baseline mode takes no steps. Every report
/// is handed to `sink` as soon as it exists.
pub fn adapt(
    state: &mut TrainState,
    source: &[SourcePair],
    target: &TargetSet,
    cfg: &TrainConfig,
    mode: AblationMode,
    sink: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<u64> {
    if mode == AblationMode::Baseline || cfg.epochs == 0 {
        return Ok(0);
    }
    if source.is_empty() || target.images.is_empty() || target.texts.is_empty() {
        return Err(Error::Usage("adaptation needs source pairs and both target lists".into()));
    }
    let bs = cfg.batch_size;
    let per_epoch = target.images.len().div_ceil(bs) as u64;
    state.total_steps = state.iteration + per_epoch * cfg.epochs as u64;
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        let img_batches = batch_indices(target.images.len(), bs, state.rng.next_u64())?;
        let txt_batches = batch_indices(target.texts.len(), bs, state.rng.next_u64())?;
        let src_batches = batch_indices(source.len(), bs, state.rng.next_u64())?;
        for (i, ib) in img_batches.iter().enumerate() {
            let tb = &txt_batches[i % txt_batches.len()];
            let sb = &src_batches[i % src_batches.len()];
            let ti: Vec<&UnlabeledSample> = ib.iter().map(|&j| &target.images[j]).collect();
            let tt: Vec<&UnlabeledSample> = tb.iter().map(|&j| &target.texts[j]).collect();
            let sp: Vec<&SourcePair> = sb.iter().map(|&j| &source[j]).collect();
            let report = adapt_step(state, &sp, &ti, &tt, cfg, mode)?;
            sink(&report)?;
            steps += 1;
        }
    }
    Ok(steps)
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that two near-zero
    /// gradients do not produce a huge ratio.
    pub floor: f64,
    /// Check a random subset of this many parameters; all when absent.
    pub max_params: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_params: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

fn flat_names(params: &ModelParams) -> Vec<String> {
    params
        .named_tensors()
        .into_iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| format!("{name}[{i}]")))
        .collect()
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn compare_gradients(
    params: &ModelParams,
    analytic: &ModelParams,
    f: impl Fn(&ModelParams) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    params.check_same_structure(analytic)?;
    let n = params.num_params();
    let mut indices: Vec<usize> = (0..n).collect();
    if let Some(m) = opts.max_params {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
        indices.truncate(m.min(n));
        indices.sort_unstable();
    }
    let names = flat_names(params);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: indices.len(),
        max_rel_err: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for &i in &indices {
        let x = params.get_flat(i);
        probe.set_flat(i, x + opts.step);
        let up = f(&probe)?;
        probe.set_flat(i, x - opts.step);
        let down = f(&probe)?;
        probe.set_flat(i, x);
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic.get_flat(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_param = names[i].clone();
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}

/// Checks the hand-derived gradient of `λ1·cd_itc + λ2·cd_itm` for one batch
/// with the plan held fixed.
pub fn grad_check(
    state: &TrainState,
    source: &[&SourcePair],
    target_images: &[&UnlabeledSample],
    target_texts: &[&UnlabeledSample],
    cfg: &TrainConfig,
    mode: AblationMode,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let raw = RawBatch::new(source, target_images, target_texts)?;
    let (plan, _) = make_plan(state, &raw, cfg, mode)?;
    let student = state.pair.student();
    let analytic = objective(student, &raw, &plan, &cfg.loss)?.grads;
    let loss_cfg = LossConfig {
        lambda_aux: 0.0,
        ..cfg.loss.clone()
    };
    compare_gradients(
        student,
        &analytic,
        |p| Ok(objective(p, &raw, &plan, &loss_cfg)?.report.total),
        opts,
    )
}
