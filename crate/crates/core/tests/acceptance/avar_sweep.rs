use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::losses::DistillMethod;
use adlab::models::{ModelParams, Teacher, TeacherEmulation};
use adlab::train::{train, TrainConfig};
use adlab::variance::{estimate_avar, SplitPlan};

use crate::{ensure, Outcome};

const CLASSES: usize = 4;
const ALPHAS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn run() -> Outcome {
    let spec = DatasetSpec {
        seed: 0,
        label_noise: 0.3,
        spread: 0.08,
        train_fraction: 0.2,
        ..DatasetSpec::synthetic(DatasetKind::GaussianMixture, CLASSES, 500)
    };
    let data = gen_dataset(&spec).map_err(|e| e.to_string())?;
    let eps = 0.6 * spec.class_margin;
    let teacher_cfg = TrainConfig {
        tas_every: 0,
        ..TrainConfig::new(DistillMethod::PgdAt, eps).with_epochs(60)
    };
    let teacher_init = ModelParams::init_mlp(&[2, 128, 128, CLASSES], 1).map_err(|e| e.to_string())?;
    let teacher = train(None, &teacher_init, &data.train, &data.test, &teacher_cfg)
        .map_err(|e| e.to_string())?
        .student;

    let student_cfg = TrainConfig {
        tas_every: 0,
        ..TrainConfig::new(DistillMethod::Ard, eps).with_epochs(60)
    };
    let plan = SplitPlan { splits: 2, repetitions: 2, seed: 3 };
    let (mut avar, mut ro) = (vec![], vec![]);
    for alpha in ALPHAS {
        let t = Teacher::new(teacher.clone(), TeacherEmulation::LabelInterpolated { alpha })
            .map_err(|e| e.to_string())?;
        let rep = estimate_avar(
            &data.train,
            &data.test,
            Some(&t),
            &[2, 32, CLASSES],
            &student_cfg,
            &student_cfg.eval_attack,
            &plan,
        )
        .map_err(|e| e.to_string())?;
        avar.push(rep.variance);
        ro.push(rep.mean_robust_overfitting());
    }
    let table: Vec<String> = ALPHAS
        .iter()
        .zip(avar.iter().zip(&ro))
        .map(|(a, (v, r))| format!("α={a}: AVar {v:.4} RO {r:.2}"))
        .collect();
    let table = table.join(", ");
    let rho = spearman(&ALPHAS, &avar);
    ensure!(rho == 1.0, "Spearman(α, AVar) = {rho:.3}; {table}");
    let mut order: Vec<usize> = (0..ALPHAS.len()).collect();
    order.sort_by(|&a, &b| avar[a].total_cmp(&avar[b]));
    ensure!(
        order.windows(2).all(|w| ro[w[0]] <= ro[w[1]]),
        "RO not non-decreasing in AVar; {table}"
    );
    Ok(format!("Spearman(α, AVar) = 1, RO monotone in AVar; {table}"))
}
