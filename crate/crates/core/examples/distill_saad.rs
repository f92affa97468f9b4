//! Entropy-weighted distillation (SAAD and SAAD-C) from a sharpened teacher,
//! next to the same loss with unit weights.

use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::diagnostics::robust_overfitting;
use adlab::losses::{DistillMethod, Weighting};
use adlab::models::{ModelParams, Teacher, TeacherEmulation};
use adlab::train::{train, TrainConfig};

fn main() -> adlab::Result<()> {
    let spec = DatasetSpec {
        label_noise: 0.2,
        ..DatasetSpec::synthetic(DatasetKind::GaussianMixture, 4, 120)
    };
    let data = gen_dataset(&spec)?;
    let eps = 0.5 * spec.class_margin;

    let teacher_cfg = TrainConfig::new(DistillMethod::PgdAt, eps).with_epochs(15);
    let tp = train(None, &ModelParams::init_mlp(&[2, 64, 64, 4], 1)?, &data.train, &data.test, &teacher_cfg)?.student;
    let teacher = Teacher::new(tp, TeacherEmulation::TemperatureSharpened { temperature: 0.5 })?;
    let init = ModelParams::init_mlp(&[2, 16, 4], 2)?;

    for (name, method, weighting) in [
        ("unit", DistillMethod::Saad, Weighting::Unit),
        ("saad", DistillMethod::Saad, Weighting::Entropy),
        ("saad-c", DistillMethod::SaadC, Weighting::Entropy),
    ] {
        let mut cfg = TrainConfig::new(method, eps).with_epochs(15);
        cfg.distill.weighting = weighting;
        let out = train(Some(&teacher), &init, &data.train, &data.test, &cfg)?;
        let last = out.metrics.rows.last().unwrap();
        println!(
            "{name:>6}: clean {:.1} pgd {:.1} RO {:.2} mean w {:.3}",
            last.clean_test_acc,
            last.robust_test_acc,
            robust_overfitting(&out.metrics.robust_test_curve())?,
            last.mean_weight
        );
    }
    Ok(())
}
