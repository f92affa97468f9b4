//! Transferability audit: which student-crafted adversarial points also
//! fool the teacher, plus the teacher-entropy histogram and the entropy
//! lower bound on every score.

use adlab::attacks::{AttackConfig, InnerLoss};
use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::diagnostics::{entropy_histogram, tas_ratio};
use adlab::losses::DistillMethod;
use adlab::models::{ModelParams, Teacher, TeacherEmulation};
use adlab::train::{train, TrainConfig};

fn main() -> adlab::Result<()> {
    let spec = DatasetSpec::synthetic(DatasetKind::GaussianMixture, 4, 100);
    let data = gen_dataset(&spec)?;
    let eps = 0.6 * spec.class_margin;
    let tp = train(
        None,
        &ModelParams::init_mlp(&[2, 64, 64, 4], 1)?,
        &data.train,
        &data.test,
        &TrainConfig::new(DistillMethod::PgdAt, eps).with_epochs(10),
    )?
    .student;
    let calibrated = Teacher::new(tp.clone(), TeacherEmulation::AsTrained)?;
    let student = train(
        Some(&calibrated),
        &ModelParams::init_mlp(&[2, 16, 4], 2)?,
        &data.train,
        &data.test,
        &TrainConfig::new(DistillMethod::Rslad, eps).with_epochs(10),
    )?
    .student;

    let sa = AttackConfig::train(eps).with_inner_loss(InnerLoss::KlTeacherClean);
    let ta = AttackConfig::eval(eps, 20);
    for emulation in [
        TeacherEmulation::AsTrained,
        TeacherEmulation::TemperatureSharpened { temperature: 0.5 },
    ] {
        let teacher = Teacher::new(tp.clone(), emulation)?;
        let rep = tas_ratio(&student, &teacher, &data.train.x, &data.train.labels, &sa, &ta, 1.0)?;
        let hist = entropy_histogram(&rep.teacher_adv_entropy, 4, 10)?;
        println!("{emulation:?}: TAS ratio {:.3}", rep.ratio);
        println!("  teacher entropy counts {:?}", hist.counts);
    }
    Ok(())
}
