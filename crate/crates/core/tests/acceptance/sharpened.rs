use adlab::attacks::{AttackConfig, InnerLoss};
use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::diagnostics::{robust_overfitting, tas_ratio};
use adlab::losses::{DistillMethod, Weighting};
use adlab::models::{ModelParams, Teacher, TeacherEmulation};
use adlab::train::{train, TrainConfig};

use crate::Outcome;

const CLASSES: usize = 8;
const DIMS: usize = 8;
const TEMPERATURE: f64 = 0.5;

pub fn run() -> Outcome {
    let e = |e: adlab::Error| e.to_string();
    let spec = DatasetSpec {
        seed: 0,
        dims: DIMS,
        label_noise: 0.3,
        spread: 0.04,
        train_fraction: 0.2,
        ..DatasetSpec::synthetic(DatasetKind::GaussianMixture, CLASSES, 500)
    };
    let data = gen_dataset(&spec).map_err(e)?;
    let eps = 0.6 * spec.class_margin;
    let cfg = |method| TrainConfig {
        tas_every: 0,
        ..TrainConfig::new(method, eps).with_epochs(60)
    };
    let teacher_init = ModelParams::init_mlp(&[DIMS, 128, 128, CLASSES], 1).map_err(e)?;
    let tp = train(None, &teacher_init, &data.train, &data.test, &cfg(DistillMethod::PgdAt))
        .map_err(e)?
        .student;
    let calibrated = Teacher::new(tp.clone(), TeacherEmulation::AsTrained).map_err(e)?;
    let sharpened = Teacher::new(
        tp,
        TeacherEmulation::TemperatureSharpened { temperature: TEMPERATURE },
    )
    .map_err(e)?;
    let init = ModelParams::init_mlp(&[DIMS, 32, CLASSES], 9).map_err(e)?;

    let probe = train(Some(&calibrated), &init, &data.train, &data.test, &cfg(DistillMethod::Rslad))
        .map_err(e)?
        .student;
    let sa = AttackConfig::train(eps).with_seed(5).with_inner_loss(InnerLoss::KlTeacherClean);
    let ta = AttackConfig::eval(eps, 20);
    let tas = |t: &Teacher| {
        tas_ratio(&probe, t, &data.train.x, &data.train.labels, &sa, &ta, 1.0).map(|r| r.ratio)
    };
    let (tas_cal, tas_sharp) = (tas(&calibrated).map_err(e)?, tas(&sharpened).map_err(e)?);

    let mut rob = vec![];
    let mut ro = vec![];
    for weighting in [Weighting::Unit, Weighting::Entropy] {
        let mut c = cfg(DistillMethod::Saad);
        c.distill.weighting = weighting;
        let out = train(Some(&sharpened), &init, &data.train, &data.test, &c).map_err(e)?;
        let curve = out.metrics.robust_test_curve();
        rob.push(*curve.last().unwrap());
        ro.push(robust_overfitting(&curve).map_err(e)?);
    }
    let detail = format!(
        "TAS calibrated {tas_cal:.3} sharpened {tas_sharp:.3}; \
         PGD-20 test acc SAAD {:.2} baseline {:.2}; RO SAAD {:.2} baseline {:.2}",
        rob[1], rob[0], ro[1], ro[0]
    );
    let mut failed = vec![];
    if tas_sharp >= tas_cal {
        failed.push("TAS ordering");
    }
    if rob[1] <= rob[0] {
        failed.push("robust accuracy margin");
    }
    if ro[1] > ro[0] {
        failed.push("RO");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} failed; {detail}", failed.join(", ")))
    }
}
