//! EMA teacher and the teacher's soft similarity targets over the queues.

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureBatch, FeatureRole, Provenance};
use crate::error::{shape_err, Error, Result};
use crate::model::ModelParams;
use crate::numerics::{softmax_temp, Matrix};

/// Paper default for the teacher momentum (called `α` here to keep `m` free
/// for the modality index).
pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// Student and teacher parameter sets of identical structure.
///
/// The teacher is only reachable immutably from outside; the single way to
/// change it is [`TeacherStudentPair::ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentPair {
    student: ModelParams,
    teacher: ModelParams,
    momentum: f64,
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("momentum must lie in [0, 1], got {m}")))
    }
}

impl TeacherStudentPair {
    /// Teacher starts as a deep copy of the student.
    pub fn new(student: ModelParams, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            momentum,
        })
    }

    pub fn from_parts(student: ModelParams, teacher: ModelParams, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        student.check_same_structure(&teacher)?;
        Ok(Self {
            student,
            teacher,
            momentum,
        })
    }

    pub fn student(&self) -> &ModelParams {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut ModelParams {
        &mut self.student
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, m: f64) -> Result<()> {
        check_momentum(m)?;
        self.momentum = m;
        Ok(())
    }

    /// Re-seeds the teacher from the current student (end of warm-up).
    pub fn sync_teacher(&mut self) {
        self.teacher = self.student.clone();
    }

    /// `θ_T ← α·θ_T + (1−α)·θ_S` for every scalar.
    pub fn ema_update(&mut self) -> Result<()> {
        self.student.check_same_structure(&self.teacher)?;
        let m = self.momentum;
        for (t, s) in self.teacher.tensors_mut().into_iter().zip(self.student.tensors()) {
            if t.len() != s.len() {
                return Err(Error::Structural("teacher/student tensor length drift".into()));
            }
            for (tv, sv) in t.iter_mut().zip(s) {
                *tv = m * *tv + (1.0 - m) * sv;
            }
        }
        Ok(())
    }
}

/// Teacher similarity distributions over the target queues. A direction is
/// `None` when its queue was empty and the matching loss term is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTargets {
    pub i2t: Option<Matrix>,
    pub t2i: Option<Matrix>,
    pub tau: f64,
}

/// Row-wise temperature softmax of `features · queueᵀ`.
pub fn queue_distribution(features: &Matrix, queue: &Matrix, tau: f64) -> Result<Matrix> {
    if queue.rows() > 0 && features.rows() > 0 && queue.cols() != features.cols() {
        return Err(shape_err!("queue width {} vs feature width {}", queue.cols(), features.cols()));
    }
    let sims = features.matmul_t(queue)?;
    let mut out = Matrix::zeros(sims.rows(), sims.cols());
    for i in 0..sims.rows() {
        out.row_mut(i).copy_from_slice(&softmax_temp(sims.row(i), tau)?);
    }
    Ok(out)
}

/// Soft targets `s_i2t` (teacher image vs. target-text queue) and `s_t2i`
/// (teacher text vs. target-image queue).
pub fn pseudo_targets(
    teacher_img: &FeatureBatch,
    teacher_txt: &FeatureBatch,
    q_tt: &Matrix,
    q_ti: &Matrix,
    tau: f64,
) -> Result<PseudoTargets> {
    for (batch, role) in [
        (teacher_img, FeatureRole::PseudoTargetImage),
        (teacher_txt, FeatureRole::PseudoTargetText),
    ] {
        if batch.role() != role || batch.provenance() != Provenance::Teacher {
            return Err(Error::Usage(format!(
                "pseudo targets need teacher {role:?} features, got {:?}",
                batch.role()
            )));
        }
    }
    let direction = |f: &FeatureBatch, q: &Matrix| -> Result<Option<Matrix>> {
        if q.rows() == 0 {
            Ok(None)
        } else {
            queue_distribution(f.features(), q, tau).map(Some)
        }
    };
    Ok(PseudoTargets {
        i2t: direction(teacher_img, q_tt)?,
        t2i: direction(teacher_txt, q_ti)?,
        tau,
    })
}
