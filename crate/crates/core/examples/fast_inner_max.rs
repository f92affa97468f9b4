//! The first-order inner maximization queries the teacher once per batch;
//! the iterative kl-teacher-adv attack queries it every step.

use adlab::attacks::{craft, AttackConfig, InnerLoss};
use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::models::{ModelParams, Teacher, TeacherEmulation};

fn main() -> adlab::Result<()> {
    let data = gen_dataset(&DatasetSpec::synthetic(DatasetKind::GaussianMixture, 3, 20))?;
    let student = ModelParams::init_mlp(&[2, 16, 3], 0)?;
    let teacher = Teacher::new(ModelParams::init_mlp(&[2, 32, 32, 3], 1)?, TeacherEmulation::AsTrained)?;
    let cfg = AttackConfig::train(0.05);
    let (x, y) = (&data.train.x, &data.train.labels);

    for inner in [InnerLoss::FastFirstOrder, InnerLoss::KlTeacherAdv] {
        teacher.reset_counters();
        let out = craft(&student, Some(&teacher), x, y, &cfg, inner, 1.0)?;
        println!(
            "{inner:?}: {} steps, teacher forward {} backward {}, final inner loss {:.4}",
            cfg.steps,
            teacher.forward_calls(),
            teacher.backward_calls(),
            out.loss_trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
