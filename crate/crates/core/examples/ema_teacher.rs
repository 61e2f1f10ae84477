//! The teacher drifts toward a frozen student geometrically.

use gckd::distillation::TeacherStudentPair;
use gckd::encoder::EncoderDims;
use gckd::model::{ModelDims, ModelParams};

fn main() -> gckd::Result<()> {
    let dims = ModelDims {
        encoder: EncoderDims::new(4, 4),
        gnn_layers: 1,
    };
    let student = ModelParams::init(1, dims)?;
    let teacher = ModelParams::init(2, dims)?;
    let gap0 = (student.get_flat(0) - teacher.get_flat(0)).abs();
    let mut pair = TeacherStudentPair::from_parts(student, teacher, 0.999)?;
    for n in 1..=1000u32 {
        pair.ema_update()?;
        if [1, 10, 100, 1000].contains(&n) {
            let gap = (pair.student().get_flat(0) - pair.teacher().get_flat(0)).abs();
            println!("n = {n:4}: |s - t| = {gap:.6}  (0.999^n * initial gap = {:.6})", 0.999f64.powi(n as i32) * gap0);
        }
    }
    Ok(())
}
