//! Adversarial noise / bias / variance decomposition and the split-based
//! estimator of adversarial variance.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, InnerLoss};
use crate::data::Dataset;
use crate::diagnostics::robust_overfitting;
use crate::error::{Error, Result};
use crate::models::{Classifier, ModelParams, Teacher};
use crate::rng;
use crate::tensor::{ProbBatch, PROB_FLOOR};
use crate::train::{train, TrainConfig};

fn logs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.max(PROB_FLOOR).ln()).collect()
}

/// `log ȳ` for the normalized geometric mean of the rows, and `−log Z`.
fn log_geometric_mean(preds: &[&[f64]]) -> Result<(Vec<f64>, f64)> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("geometric mean of no predictions".into()))?;
    let c = first.len();
    if preds.iter().any(|p| p.len() != c) {
        return Err(Error::Dimension("predictions differ in width".into()));
    }
    let n = preds.len() as f64;
    let mut mean_log = vec![0.0; c];
    for p in preds {
        for (m, l) in mean_log.iter_mut().zip(logs(p)) {
            *m += l / n;
        }
    }
    let top = mean_log.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = top + mean_log.iter().map(|m| (m - top).exp()).sum::<f64>().ln();
    Ok((mean_log.iter().map(|m| m - log_z).collect(), -log_z))
}

/// `ȳ ∝ exp(mean_j log ŷ_j)`, renormalized onto the simplex.
pub fn geometric_mean_simplex(preds: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(log_geometric_mean(preds)?.0.iter().map(|l| l.exp()).collect())
}

/// Row-wise geometric mean across several batches of predictions.
pub fn geometric_mean_batch(preds: &[ProbBatch]) -> Result<ProbBatch> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("geometric mean of no predictions".into()))?;
    let (r, c) = (first.rows(), first.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let rows: Vec<&[f64]> = preds.iter().map(|p| p.row(i)).collect();
        out.extend(geometric_mean_simplex(&rows)?);
    }
    ProbBatch::new(r, c, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDecomposition {
    pub noise: f64,
    pub bias: f64,
    pub variance: f64,
    /// `mean_j CE(y, ŷ_j)`
    pub risk: f64,
    /// `risk − (noise + bias + variance)`
    pub residual: f64,
}

/// Splits the expected cross-entropy of the predictions `ŷ_j` against `y`
/// into `H(y) + KL(y ‖ ȳ) + mean_j KL(ȳ ‖ ŷ_j)`.
pub fn decompose_point(y: &[f64], preds: &[&[f64]]) -> Result<PointDecomposition> {
    let (log_bar, variance) = log_geometric_mean(preds)?;
    if y.len() != log_bar.len() {
        return Err(Error::Dimension("target and predictions differ in width".into()));
    }
    let ly = logs(y);
    let noise: f64 = -y.iter().zip(&ly).map(|(p, l)| p * l).sum::<f64>();
    let bias: f64 = y
        .iter()
        .zip(&ly)
        .zip(&log_bar)
        .map(|((p, l), lb)| p * (l - lb))
        .sum();
    let n = preds.len() as f64;
    let risk: f64 = preds
        .iter()
        .map(|q| -y.iter().zip(logs(q)).map(|(p, l)| p * l).sum::<f64>())
        .sum::<f64>()
        / n;
    let (noise, bias, variance) = (noise.max(0.0), bias.max(0.0), variance.max(0.0));
    Ok(PointDecomposition {
        noise,
        bias,
        variance,
        risk,
        residual: risk - (noise + bias + variance),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    /// Disjoint training splits per repetition.
    pub splits: usize,
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 || self.repetitions == 0 {
            return Err(Error::Config("splits and repetitions must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Index sets for repetition `k` plus the dropped remainder (sorted).
    pub fn partition(&self, n: usize, k: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::seeded(rng::derive(self.seed, &[k as u64])));
        let per = n / self.splits;
        let parts = (0..self.splits)
            .map(|j| idx[j * per..(j + 1) * per].to_vec())
            .collect();
        let mut dropped = idx[per * self.splits..].to_vec();
        dropped.sort_unstable();
        (parts, dropped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub repetition: usize,
    pub index: usize,
    #[serde(flatten)]
    pub terms: PointDecomposition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub noise: f64,
    pub bias: f64,
    pub variance: f64,
    pub risk: f64,
    pub splits: usize,
    pub repetitions: usize,
    pub per_repetition_variance: Vec<f64>,
    /// Robust-overfitting gap of every split student, in training order.
    pub split_robust_overfitting: Vec<f64>,
    pub dropped: Vec<Vec<usize>>,
    pub max_abs_residual: f64,
    pub per_point: Vec<PointRow>,
}

impl VarianceReport {
    pub fn mean_robust_overfitting(&self) -> f64 {
        let r = &self.split_robust_overfitting;
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }

    pub fn per_point_csv(&self) -> String {
        let mut out = String::from("repetition,index,noise,bias,variance,risk,residual\n");
        for p in &self.per_point {
            let t = p.terms;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.repetition, p.index, t.noise, t.bias, t.variance, t.risk, t.residual
            ));
        }
        out
    }
}

/// Model probabilities at cross-entropy PGD points crafted against that model.
pub fn adversarial_predictions(
    model: &ModelParams,
    points: &Dataset,
    attack: &AttackConfig,
) -> Result<ProbBatch> {
    let adv = pgd(
        model,
        None,
        &points.x,
        &points.labels,
        &attack.with_inner_loss(InnerLoss::CeStudent),
    )?;
    model.probs(&adv.x_adv, &points.labels)
}

/// Decomposes every test point over a set of models.
pub fn decompose_models(
    models: &[ModelParams],
    points: &Dataset,
    attack: &AttackConfig,
) -> Result<Vec<PointDecomposition>> {
    let preds: Vec<ProbBatch> = models
        .par_iter()
        .map(|m| adversarial_predictions(m, points, attack))
        .collect::<Result<_>>()?;
    let y = ProbBatch::one_hot(&points.labels, points.classes)?;
    (0..points.len())
        .map(|i| {
            let rows: Vec<&[f64]> = preds.iter().map(|p| p.row(i)).collect();
            decompose_point(y.row(i), &rows)
        })
        .collect()
}

fn mean_of(v: &[PointDecomposition], f: impl Fn(&PointDecomposition) -> f64) -> f64 {
    v.iter().map(f).sum::<f64>() / v.len().max(1) as f64
}

/// Trains one student per split and repetition, attacks each at the test
/// points and averages the decomposition over repetitions.
#[allow(clippy::too_many_arguments)]
pub fn estimate_avar(
    train_set: &Dataset,
    test_points: &Dataset,
    teacher: Option<&Teacher>,
    student_sizes: &[usize],
    train_cfg: &TrainConfig,
    attack: &AttackConfig,
    plan: &SplitPlan,
) -> Result<VarianceReport> {
    plan.validate()?;
    attack.validate()?;
    if train_set.len() < plan.splits {
        return Err(Error::Config(format!(
            "{} training samples cannot fill {} splits",
            train_set.len(),
            plan.splits
        )));
    }
    let mut jobs = Vec::new();
    let mut dropped = Vec::new();
    for k in 0..plan.repetitions {
        let (parts, rest) = plan.partition(train_set.len(), k);
        dropped.push(rest);
        for (j, idx) in parts.into_iter().enumerate() {
            jobs.push((k, j, idx));
        }
    }
    let trained: Vec<(ModelParams, f64)> = jobs
        .par_iter()
        .map(|(k, j, idx)| {
            let name = |e: Error| match e {
                Error::Run(m) => Error::Run(format!("split {j} of repetition {k}: {m}")),
                other => other,
            };
            let (k64, j64) = (*k as u64, *j as u64);
            let data = train_set.subset(idx)?;
            let init = ModelParams::init_mlp(student_sizes, rng::derive(plan.seed, &[k64, j64, 0]))?;
            let cfg = TrainConfig {
                seed: rng::derive(plan.seed, &[k64, j64, 1]),
                tas_every: 0,
                ..train_cfg.clone()
            };
            let out = train(teacher, &init, &data, test_points, &cfg).map_err(name)?;
            let ro = if out.metrics.rows.is_empty() {
                0.0
            } else {
                robust_overfitting(&out.metrics.robust_test_curve())?
            };
            Ok((out.student, ro))
        })
        .collect::<Result<_>>()?;

    let mut per_point = Vec::new();
    let mut per_rep = Vec::new();
    let mut sums = [0.0; 4];
    let mut max_res: f64 = 0.0;
    for k in 0..plan.repetitions {
        let models: Vec<ModelParams> = trained[k * plan.splits..(k + 1) * plan.splits]
            .iter()
            .map(|(m, _)| m.clone())
            .collect();
        let terms = decompose_models(&models, test_points, attack)?;
        per_rep.push(mean_of(&terms, |t| t.variance));
        sums[0] += mean_of(&terms, |t| t.noise);
        sums[1] += mean_of(&terms, |t| t.bias);
        sums[2] += mean_of(&terms, |t| t.variance);
        sums[3] += mean_of(&terms, |t| t.risk);
        for (i, t) in terms.into_iter().enumerate() {
            max_res = max_res.max(t.residual.abs());
            per_point.push(PointRow {
                repetition: k,
                index: i,
                terms: t,
            });
        }
    }
    let reps = plan.repetitions as f64;
    Ok(VarianceReport {
        noise: sums[0] / reps,
        bias: sums[1] / reps,
        variance: sums[2] / reps,
        risk: sums[3] / reps,
        splits: plan.splits,
        repetitions: plan.repetitions,
        per_repetition_variance: per_rep,
        split_robust_overfitting: trained.iter().map(|(_, ro)| *ro).collect(),
        dropped,
        max_abs_residual: max_res,
        per_point,
    })
}
