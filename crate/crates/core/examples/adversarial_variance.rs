//! Noise / bias / variance split of the adversarial cross-entropy, first
//! for hand-written predictions and then estimated from split-trained
//! students.

use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::losses::DistillMethod;
use adlab::models::{ModelParams, Teacher, TeacherEmulation};
use adlab::train::{train, TrainConfig};
use adlab::variance::{decompose_point, estimate_avar, SplitPlan};

fn main() -> adlab::Result<()> {
    let y = [0.0, 1.0, 0.0];
    let preds: [&[f64]; 2] = [&[0.2, 0.7, 0.1], &[0.1, 0.5, 0.4]];
    let d = decompose_point(&y, &preds)?;
    println!(
        "one point: risk {:.4} = noise {:.4} + bias {:.4} + variance {:.4} (residual {:.1e})",
        d.risk, d.noise, d.bias, d.variance, d.residual
    );

    let spec = DatasetSpec {
        label_noise: 0.3,
        ..DatasetSpec::synthetic(DatasetKind::GaussianMixture, 4, 80)
    };
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
    let cfg = TrainConfig::new(DistillMethod::Ard, eps).with_epochs(8);
    let plan = SplitPlan { splits: 2, repetitions: 2, seed: 3 };
    for alpha in [0.0, 1.0] {
        let teacher = Teacher::new(tp.clone(), TeacherEmulation::LabelInterpolated { alpha })?;
        let rep = estimate_avar(&data.train, &data.test, Some(&teacher), &[2, 16, 4], &cfg, &cfg.eval_attack, &plan)?;
        println!(
            "α = {alpha}: risk {:.4} noise {:.4} bias {:.4} AVar {:.4}",
            rep.risk, rep.noise, rep.bias, rep.variance
        );
    }
    Ok(())
}
