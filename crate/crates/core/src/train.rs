//! Training loop for every method: per-batch inner maximization, outer loss,
//! SGD with momentum and weight decay, step-decay schedule, SWA snapshots and
//! per-epoch metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft, fgsm, pgd, AttackConfig, InnerLoss};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::diagnostics::tas_ratio;
use crate::error::{Error, Result};
use crate::losses::{outer_loss, DistillMethod, DistillSpec};
use crate::models::{Classifier, ModelParams, SwaState, Teacher};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub swa_start_epoch: usize,
    pub eval_attack: AttackConfig,
    pub train_attack: AttackConfig,
    pub distill: DistillSpec,
    pub seed: u64,
    /// Audit the transferable-sample ratio every this many epochs (0 = never).
    pub tas_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: 60 epochs, decay ×0.1 at 30 and 45, SWA from 28,
    /// batch 64, lr 0.1, momentum 0.9, weight decay 5e-4, PGD-20 evaluation.
    pub fn new(method: DistillMethod, epsilon: f64) -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![30, 45],
            lr_decay_factor: 10.0,
            swa_start_epoch: 28,
            eval_attack: AttackConfig::eval(epsilon, 20),
            train_attack: AttackConfig::train(epsilon),
            distill: DistillSpec::new(method),
            seed: 0,
            tas_every: 10,
        }
    }

    /// Keeps the schedule's proportions while changing the epoch count.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let scale = |e: usize| (e as f64 * epochs as f64 / self.epochs as f64).round() as usize;
        self.lr_decay_epochs = self.lr_decay_epochs.iter().map(|&e| scale(e)).collect();
        self.lr_decay_epochs.dedup();
        self.lr_decay_epochs.retain(|&e| e < epochs);
        self.swa_start_epoch = (0.475 * epochs as f64) as usize;
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(
                "need lr > 0, momentum in [0, 1) and weight_decay ≥ 0".into(),
            ));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "lr_decay_epochs must be strictly increasing".into(),
            ));
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::Config("decay epochs must be < epochs".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be > 0".into()));
        }
        if self.swa_start_epoch > self.epochs {
            return Err(Error::Config("swa_start_epoch must be ≤ epochs".into()));
        }
        self.eval_attack.validate()?;
        self.train_attack.validate()?;
        self.distill.validate()
    }

    fn inner_loss(&self) -> InnerLoss {
        self.train_attack
            .inner_loss
            .unwrap_or(self.distill.method.default_inner_loss())
    }
}

/// Piecewise-constant learning rate at a 0-based epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [0, {})",
            cfg.epochs
        )));
    }
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.lr / cfg.lr_decay_factor.powi(decays as i32))
}

/// `v ← μv + g + λp`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.tensors().count();
    if grads.len() != n || velocity.len() != n {
        return Err(Error::Dimension(format!(
            "{n} parameter tensors, {} grads, {} velocities",
            grads.len(),
            velocity.len()
        )));
    }
    for (i, (p, g)) in params.tensors().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != velocity[i].shape() {
            return Err(Error::Dimension(format!("parameter {i} shape mismatch")));
        }
        if !g.all_finite() {
            return Err(Error::Run(format!("non-finite gradient in parameter {i}")));
        }
    }
    for ((p, g), v) in params.tensors_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pj, gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vj = momentum * *vj + gj + weight_decay * *pj;
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_train_acc: f64,
    pub clean_test_acc: f64,
    pub robust_train_acc: f64,
    pub robust_test_acc: f64,
    pub mean_weight: f64,
    pub tas_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rows: Vec<MetricsRow>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,clean_train_acc,clean_test_acc,robust_train_acc,robust_test_acc,mean_weight,tas_ratio";

    pub fn robust_test_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.robust_test_acc).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let tas = r.tas_ratio.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.clean_train_acc,
                r.clean_test_acc,
                r.robust_train_acc,
                r.robust_test_acc,
                r.mean_weight,
                tas
            );
        }
        out
    }
}

/// Accuracies in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
}

const EVAL_CHUNK: usize = 256;

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s..(s + EVAL_CHUNK).min(n)).collect())
        .collect()
}

fn hits(model: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<Vec<bool>> {
    Ok(model
        .logits(x, labels)?
        .argmax_rows()
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect())
}

/// Per-sample correctness under the attack produced by `attack` for each
/// chunk (`None` means clean). Chunks run in parallel; output is in index
/// order.
fn per_sample<F>(model: &ModelParams, data: &Dataset, attack: F) -> Result<Vec<bool>>
where
    F: Fn(&Tensor, &[usize]) -> Result<Option<Tensor>> + Sync,
{
    let parts: Vec<Result<Vec<bool>>> = chunks(data.len())
        .par_iter()
        .map(|idx| {
            let x = data.x.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let xa = attack(&x, &y)?.unwrap_or(x);
            hits(model, &xa, &y)
        })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn percent(v: &[bool]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        100.0 * v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
    }
}

pub fn clean_correct(model: &ModelParams, data: &Dataset) -> Result<Vec<bool>> {
    per_sample(model, data, |_, _| Ok(None))
}

/// Correctness under cross-entropy PGD with `attack`.
pub fn pgd_correct(model: &ModelParams, data: &Dataset, attack: &AttackConfig) -> Result<Vec<bool>> {
    let cfg = attack.with_inner_loss(InnerLoss::CeStudent);
    per_sample(model, data, |x, y| {
        Ok(Some(pgd(model, None, x, y, &cfg)?.x_adv))
    })
}

pub fn evaluate(model: &ModelParams, data: &Dataset, eval_attack: &AttackConfig) -> Result<EvalResult> {
    eval_attack.validate()?;
    let clean = clean_correct(model, data)?;
    let f = per_sample(model, data, |x, y| {
        Ok(Some(fgsm(model, x, y, eval_attack)?.x_adv))
    })?;
    let p = pgd_correct(model, data, eval_attack)?;
    Ok(EvalResult {
        clean_acc: percent(&clean),
        fgsm_acc: percent(&f),
        pgd_acc: percent(&p),
    })
}

/// Robust accuracy at each budget of a non-decreasing sweep. A sample counts
/// as robust at `ε_k` only if it survives the clean input and the attacks at
/// every `ε_j ≤ ε_k`, all of which lie inside the larger ball.
pub fn robust_accuracy_sweep(
    model: &ModelParams,
    data: &Dataset,
    eval_attack: &AttackConfig,
    epsilons: &[f64],
) -> Result<Vec<f64>> {
    if !epsilons.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::Contract("epsilon sweep must be non-decreasing".into()));
    }
    let mut alive = clean_correct(model, data)?;
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = AttackConfig {
            step_size: eps / 4.0,
            ..eval_attack.with_epsilon(eps)
        };
        let ok = pgd_correct(model, data, &cfg)?;
        for (a, b) in alive.iter_mut().zip(ok) {
            *a &= b;
        }
        out.push(percent(&alive));
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub student: ModelParams,
    pub swa: Option<ModelParams>,
    pub metrics: MetricsRecord,
}

/// Runs the configured method end to end.
pub fn train(
    teacher: Option<&Teacher>,
    student_init: &ModelParams,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let method = cfg.distill.method;
    let inner = cfg.inner_loss();
    if (method.needs_teacher() || inner.needs_teacher()) && teacher.is_none() {
        return Err(Error::Config(format!("{method:?} training needs a teacher")));
    }
    if train_set.dims() != student_init.input_dim() {
        return Err(Error::Dimension(format!(
            "student expects {} inputs, data has {}",
            student_init.input_dim(),
            train_set.dims()
        )));
    }
    let mut student = student_init.clone();
    let mut velocity: Vec<Tensor> = student.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    let mut swa = SwaState::new();
    let mut metrics = MetricsRecord::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive(cfg.seed, &[epoch as u64])));
        let (mut loss_sum, mut finite_batches, mut weight_sum, mut weight_batches) =
            (0.0, 0usize, 0.0, 0usize);

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.x.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let attack = cfg
                .train_attack
                .with_seed(rng::derive(cfg.seed, &[epoch as u64, b as u64, 1]));
            let adv = craft(&student, teacher, &x, &y, &attack, inner, cfg.distill.lambda_in)?;

            let mut tape = Tape::new();
            let bound = student.bind(&mut tape, true);
            let out = outer_loss(&mut tape, &bound, teacher, &x, &adv.x_adv, &y, &cfg.distill)?;
            let loss = tape.value(out.loss).data()[0];
            if !loss.is_finite() {
                continue;
            }
            tape.backward(out.loss)?;
            let grads = bound.grads(&tape);
            sgd_step(
                &mut student,
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            loss_sum += loss;
            finite_batches += 1;
            if !out.weights.is_empty() {
                weight_sum += out.weights.mean();
                weight_batches += 1;
            }
        }
        if finite_batches == 0 && !train_set.is_empty() {
            return Err(Error::Run(format!(
                "epoch {epoch}: every batch produced a non-finite loss"
            )));
        }
        if epoch >= cfg.swa_start_epoch {
            swa.update(&student)?;
        }

        let clean_train = clean_correct(&student, train_set)?;
        let clean_test = clean_correct(&student, test_set)?;
        let robust_train = pgd_correct(&student, train_set, &cfg.eval_attack)?;
        let robust_test = pgd_correct(&student, test_set, &cfg.eval_attack)?;
        let tas = match teacher {
            Some(t) if cfg.tas_every > 0 && (epoch + 1) % cfg.tas_every == 0 => {
                let teacher_attack = cfg
                    .eval_attack
                    .with_epsilon(cfg.train_attack.epsilon)
                    .with_inner_loss(InnerLoss::CeStudent);
                let teacher_attack = AttackConfig {
                    step_size: teacher_attack.epsilon / 4.0,
                    ..teacher_attack
                };
                let student_attack = cfg
                    .train_attack
                    .with_seed(rng::derive(cfg.seed, &[epoch as u64, u64::MAX]))
                    .with_inner_loss(inner);
                Some(
                    tas_ratio(
                        &student,
                        t,
                        &train_set.x,
                        &train_set.labels,
                        &student_attack,
                        &teacher_attack,
                        cfg.distill.lambda_in,
                    )?
                    .ratio,
                )
            }
            _ => None,
        };
        metrics.rows.push(MetricsRow {
            epoch,
            lr,
            train_loss: if finite_batches > 0 {
                loss_sum / finite_batches as f64
            } else {
                0.0
            },
            clean_train_acc: percent(&clean_train),
            clean_test_acc: percent(&clean_test),
            robust_train_acc: percent(&robust_train),
            robust_test_acc: percent(&robust_test),
            mean_weight: if weight_batches > 0 {
                weight_sum / weight_batches as f64
            } else {
                1.0
            },
            tas_ratio: tas,
        });
    }
    Ok(TrainOutcome {
        student,
        swa: swa.into_averaged(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize, decay: Vec<usize>) -> TrainConfig {
        TrainConfig {
            epochs,
            lr_decay_epochs: decay,
            swa_start_epoch: 0,
            ..TrainConfig::new(DistillMethod::PgdAt, 0.1)
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(200, vec![100, 150]);
        assert_eq!(lr_at(&c, 0).unwrap(), 0.1);
        assert!((lr_at(&c, 99).unwrap() - 0.1).abs() < 1e-15);
        assert!((lr_at(&c, 100).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(&c, 150).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(lr_at(&c, 200), Err(Error::Contract(_))));
        let flat = cfg(5, vec![]);
        assert!((0..5).all(|e| lr_at(&flat, e).unwrap() == 0.1));
        let early = cfg(5, vec![0]);
        assert!((lr_at(&early, 0).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_are_config_errors() {
        assert!(cfg(10, vec![5, 5]).validate().is_err());
        assert!(cfg(10, vec![10]).validate().is_err());
        let mut c = cfg(10, vec![]);
        c.swa_start_epoch = 11;
        assert!(c.validate().is_err());
    }

    #[test]
    fn with_epochs_keeps_proportions() {
        let c = TrainConfig::new(DistillMethod::Saad, 0.1).with_epochs(20);
        assert_eq!(c.lr_decay_epochs, vec![10, 15]);
        assert_eq!(c.swa_start_epoch, 9);
        c.validate().unwrap();
    }

    fn scalar_model(v: f64) -> ModelParams {
        ModelParams::new(
            vec![1, 1],
            vec![Tensor::scalar(v)],
            vec![Tensor::zeros(&[1, 1])],
        )
        .unwrap()
    }

    #[test]
    fn plain_descent_and_fixed_point() {
        let mut p = scalar_model(2.0);
        let mut v = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])];
        let g = vec![Tensor::scalar(0.5), Tensor::zeros(&[1, 1])];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p.weights()[0].data()[0] - 1.95).abs() < 1e-15);
        let zero = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])];
        let mut v = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])];
        let before = p.clone();
        sgd_step(&mut p, &zero, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_on_a_quadratic_match_recurrence() {
        // f(p) = a p² / 2, gradient a p.
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
        let mut p = scalar_model(1.5);
        let mut v = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])];
        let (mut rp, mut rv) = (1.5f64, 0.0f64);
        for _ in 0..2 {
            let g = vec![
                Tensor::scalar(a * p.weights()[0].data()[0]),
                Tensor::zeros(&[1, 1]),
            ];
            sgd_step(&mut p, &g, &mut v, lr, mu, wd).unwrap();
            rv = mu * rv + a * rp + wd * rp;
            rp -= lr * rv;
        }
        assert!((p.weights()[0].data()[0] - rp).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_run_error() {
        let mut p = scalar_model(1.0);
        let mut v = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])];
        let g = vec![Tensor::scalar(f64::NAN), Tensor::zeros(&[1, 1])];
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0),
            Err(Error::Run(_))
        ));
        assert_eq!(p, scalar_model(1.0));
    }

    fn two_points() -> Dataset {
        // Model f(x) = [x₀ − 0.5, 0.5 − x₀]: margin to the boundary is
        // |x₀ − 0.5|.
        Dataset::new(
            Tensor::from_rows(&[vec![0.3], vec![0.9]]).unwrap(),
            vec![1, 0],
            2,
        )
        .unwrap()
    }

    fn threshold_model() -> ModelParams {
        ModelParams::new(
            vec![1, 2],
            vec![Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap()],
            vec![Tensor::from_rows(&[vec![-0.5, 0.5]]).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn evaluation_matches_closed_form_margins() {
        let m = threshold_model();
        let d = two_points();
        // Margins are 0.2 and 0.4.
        for (eps, expect) in [(0.0, 100.0), (0.1, 100.0), (0.3, 50.0), (0.45, 0.0)] {
            let r = evaluate(&m, &d, &AttackConfig::eval(eps, 20)).unwrap();
            assert_eq!(r.clean_acc, 100.0);
            assert_eq!(r.pgd_acc, expect, "eps {eps}");
            assert_eq!(r.fgsm_acc, expect, "eps {eps}");
        }
    }

    #[test]
    fn sweep_is_non_increasing() {
        let m = ModelParams::init_mlp(&[2, 16, 3], 4).unwrap();
        let spec = crate::data::DatasetSpec::synthetic(crate::data::DatasetKind::GaussianMixture, 3, 40);
        let d = crate::data::gen_dataset(&spec).unwrap().train;
        let acc = robust_accuracy_sweep(&m, &d, &AttackConfig::eval(0.1, 10), &[0.0, 0.05, 0.1]).unwrap();
        assert!(acc.windows(2).all(|w| w[0] >= w[1]));
        let clean = evaluate(&m, &d, &AttackConfig::eval(0.0, 10)).unwrap();
        assert_eq!(acc[0], clean.clean_acc);
        assert_eq!(clean.pgd_acc, clean.clean_acc);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let m = ModelParams::init_mlp(&[1, 4, 2], 0).unwrap();
        let mut c = cfg(0, vec![]);
        c.swa_start_epoch = 0;
        let out = train(None, &m, &two_points(), &two_points(), &c).unwrap();
        assert_eq!(out.student, m);
        assert!(out.metrics.rows.is_empty());
        assert!(out.swa.is_none());
    }

    #[test]
    fn teacher_methods_require_teacher() {
        let m = ModelParams::init_mlp(&[1, 4, 2], 0).unwrap();
        let c = TrainConfig::new(DistillMethod::Ard, 0.1).with_epochs(1);
        assert!(matches!(
            train(None, &m, &two_points(), &two_points(), &c),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_header_only_when_empty() {
        assert_eq!(
            MetricsRecord::default().to_csv(),
            format!("{}\n", MetricsRecord::CSV_HEADER)
        );
    }
}
