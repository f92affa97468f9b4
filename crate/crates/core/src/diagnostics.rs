//! Transferability (TAS) scoring, the entropy lower bound on TAS, entropy
//! histograms and the robust-overfitting gap.

use serde::{Deserialize, Serialize};

use crate::attacks::{craft, pgd, AttackConfig, InnerLoss};
use crate::error::{Error, Result};
use crate::models::{Classifier, ModelParams, Teacher};
use crate::tensor::{entropy, entropy_row, kl_divergence, ProbBatch, Tensor};

/// Slack allowed when checking the entropy lower bound.
pub const LEMMA2_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasReport {
    pub per_sample_score: Vec<f64>,
    pub is_tas: Vec<bool>,
    pub ratio: f64,
    /// Teacher entropy on the student-attacked inputs.
    pub teacher_adv_entropy: Vec<f64>,
}

impl TasReport {
    pub fn from_scores(scores: Vec<f64>, teacher_adv_entropy: Vec<f64>) -> Self {
        let is_tas: Vec<bool> = scores.iter().map(|&s| s >= 0.0).collect();
        let ratio = if is_tas.is_empty() {
            0.0
        } else {
            is_tas.iter().filter(|&&t| t).count() as f64 / is_tas.len() as f64
        };
        TasReport {
            per_sample_score: scores,
            is_tas,
            ratio,
            teacher_adv_entropy,
        }
    }
}

/// `KL(p ‖ f_T(x)) − KL(p ‖ f_T(x+δ_T))` with `p = f_T(x+δ_S)`.
pub fn tas_score(
    p_on_student_adv: &ProbBatch,
    teacher_clean: &ProbBatch,
    teacher_adv: &ProbBatch,
) -> Result<Vec<f64>> {
    let to_clean = kl_divergence(p_on_student_adv, teacher_clean)
        .map_err(|e| Error::Contract(e.to_string()))?;
    let to_adv =
        kl_divergence(p_on_student_adv, teacher_adv).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(to_clean.iter().zip(&to_adv).map(|(a, b)| a - b).collect())
}

/// Audits which samples transfer: δ_S is crafted on the student with the
/// inner loss of `student_attack`, δ_T by cross-entropy PGD on the teacher.
pub fn tas_ratio(
    student: &ModelParams,
    teacher: &Teacher,
    x: &Tensor,
    labels: &[usize],
    student_attack: &AttackConfig,
    teacher_attack: &AttackConfig,
    lambda_in: f64,
) -> Result<TasReport> {
    if student_attack.epsilon != teacher_attack.epsilon {
        return Err(Error::Config(format!(
            "student and teacher attacks must share epsilon ({} vs {})",
            student_attack.epsilon, teacher_attack.epsilon
        )));
    }
    let inner = student_attack.inner_loss.unwrap_or(InnerLoss::CeStudent);
    let ds = craft(
        student,
        Some(teacher),
        x,
        labels,
        student_attack,
        inner,
        lambda_in,
    )?;
    let dt = pgd(
        teacher,
        None,
        x,
        labels,
        &teacher_attack.with_inner_loss(InnerLoss::CeStudent),
    )?;
    let p = teacher.probs(&ds.x_adv, labels)?;
    let clean = teacher.probs(x, labels)?;
    let q = teacher.probs(&dt.x_adv, labels)?;
    let scores = tas_score(&p, &clean, &q)?;
    Ok(TasReport::from_scores(scores, entropy(&p)))
}

/// Best-minus-last robust accuracy.
pub fn robust_overfitting(curve: &[f64]) -> Result<f64> {
    let last = *curve
        .last()
        .ok_or_else(|| Error::Contract("robust-overfitting needs a non-empty curve".into()))?;
    let best = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(best - last)
}

/// `H(p) + log(min q)` per row: the entropy lower bound on the TAS score.
pub fn lemma2_bound(p_on_student_adv: &ProbBatch, teacher_adv: &ProbBatch) -> Result<Vec<f64>> {
    if p_on_student_adv.rows() != teacher_adv.rows()
        || p_on_student_adv.cols() != teacher_adv.cols()
    {
        return Err(Error::Dimension("bound inputs differ in shape".into()));
    }
    Ok((0..p_on_student_adv.rows())
        .map(|i| {
            let m = teacher_adv
                .row(i)
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            entropy_row(p_on_student_adv.row(i)) + m.ln()
        })
        .collect())
}

/// Whether each score respects the entropy lower bound (with [`LEMMA2_SLACK`]).
pub fn lemma2_check(
    p_on_student_adv: &ProbBatch,
    teacher_adv: &ProbBatch,
    tas_score: &[f64],
) -> Result<Vec<bool>> {
    let bound = lemma2_bound(p_on_student_adv, teacher_adv)?;
    if bound.len() != tas_score.len() {
        return Err(Error::Dimension("score length differs from batch".into()));
    }
    Ok(bound
        .iter()
        .zip(tas_score)
        .map(|(b, s)| *s >= b - LEMMA2_SLACK)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

/// Equal-width bins over `[0, log C]`; right-open except the last bin.
pub fn entropy_histogram(
    entropies: &[f64],
    classes: usize,
    bins: usize,
) -> Result<EntropyHistogram> {
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    if classes < 2 {
        return Err(Error::Contract(
            "histogram needs at least two classes".into(),
        ));
    }
    let top = (classes as f64).ln();
    let width = top / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for &h in entropies {
        let k = ((h / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = entropies.len() as f64;
    let density = counts
        .iter()
        .map(|&c| if n > 0.0 { c as f64 / (n * width) } else { 0.0 })
        .collect();
    Ok(EntropyHistogram {
        bin_edges,
        counts,
        density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TeacherEmulation;
    use rand::Rng;

    fn random_simplex(rng: &mut crate::rng::Rng, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c)
            .map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-6)
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn score_when_attacks_coincide() {
        let p = ProbBatch::from_rows(&[vec![0.7, 0.2, 0.1]]).unwrap();
        let clean = ProbBatch::from_rows(&[vec![0.2, 0.5, 0.3]]).unwrap();
        let s = tas_score(&p, &clean, &p).unwrap();
        let kl = kl_divergence(&p, &clean).unwrap()[0];
        assert!((s[0] - kl).abs() < 1e-15);
        assert!(s[0] >= 0.0);
    }

    #[test]
    fn score_when_student_attack_is_inert() {
        let clean = ProbBatch::from_rows(&[vec![0.6, 0.3, 0.1]]).unwrap();
        let q = ProbBatch::from_rows(&[vec![0.1, 0.8, 0.1]]).unwrap();
        let s = tas_score(&clean, &clean, &q).unwrap();
        assert!((s[0] + kl_divergence(&clean, &q).unwrap()[0]).abs() < 1e-15);
        assert!(s[0] < 0.0);
    }

    #[test]
    fn score_matches_two_direct_kls_and_is_antisymmetric() {
        let mut rng = crate::rng::seeded(17);
        for _ in 0..200 {
            let rows: Vec<_> = (0..3).map(|_| random_simplex(&mut rng, 5)).collect();
            let p = ProbBatch::from_rows(&rows[0..1]).unwrap();
            let a = ProbBatch::from_rows(&rows[1..2]).unwrap();
            let b = ProbBatch::from_rows(&rows[2..3]).unwrap();
            let direct = |u: &[f64], v: &[f64]| -> f64 {
                u.iter().zip(v).map(|(x, y)| x * (x / y).ln()).sum()
            };
            let s = tas_score(&p, &a, &b).unwrap()[0];
            let expect = direct(p.row(0), a.row(0)) - direct(p.row(0), b.row(0));
            assert!((s - expect).abs() < 1e-10);
            let swapped = tas_score(&p, &b, &a).unwrap()[0];
            assert!((s + swapped).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let p = ProbBatch::uniform(2, 3);
        let q = ProbBatch::uniform(3, 3);
        assert!(matches!(tas_score(&p, &q, &q), Err(Error::Contract(_))));
    }

    #[test]
    fn robust_overfitting_cases() {
        assert_eq!(robust_overfitting(&[50.0, 55.0, 53.0]).unwrap(), 2.0);
        assert_eq!(robust_overfitting(&[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(robust_overfitting(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn lemma2_uniform_bound_is_zero() {
        let u = ProbBatch::uniform(1, 6);
        let b = lemma2_bound(&u, &u).unwrap()[0];
        assert!(b.abs() < 1e-12);
        assert!(lemma2_check(&u, &u, &[0.0]).unwrap()[0]);
    }

    #[test]
    fn lemma2_when_attacks_coincide() {
        let mut rng = crate::rng::seeded(2);
        for _ in 0..100 {
            let p = ProbBatch::from_rows(&[random_simplex(&mut rng, 4)]).unwrap();
            let clean = ProbBatch::from_rows(&[random_simplex(&mut rng, 4)]).unwrap();
            let s = tas_score(&p, &clean, &p).unwrap();
            let min_p = p.row(0).iter().cloned().fold(f64::INFINITY, f64::min);
            let bound = entropy_row(p.row(0)) + min_p.ln();
            assert!((lemma2_bound(&p, &p).unwrap()[0] - bound).abs() < 1e-15);
            assert!(s[0] >= bound);
        }
    }

    #[test]
    fn histogram_basics() {
        let h = entropy_histogram(&[0.3; 17], 4, 10).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 17);
        let width = h.bin_edges[1] - h.bin_edges[0];
        assert!((h.density.iter().sum::<f64>() * width - 1.0).abs() < 1e-12);
        let top = entropy_histogram(&[4f64.ln()], 4, 10).unwrap();
        assert_eq!(top.counts[9], 1);
        assert!(entropy_histogram(&[0.1], 4, 0).is_err());
    }

    #[test]
    fn histogram_matches_reference_binning() {
        let mut rng = crate::rng::seeded(8);
        let c = 7;
        let top = (c as f64).ln();
        let values: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..=top)).collect();
        let bins = 13;
        let h = entropy_histogram(&values, c, bins).unwrap();
        // Reference: linear scan over explicit edges.
        let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
        let mut reference = vec![0usize; bins];
        for &v in &values {
            let mut k = bins - 1;
            for i in 0..bins {
                if v >= edges[i] && v < edges[i + 1] {
                    k = i;
                    break;
                }
            }
            reference[k] += 1;
        }
        assert_eq!(h.counts, reference);
    }

    #[test]
    fn tas_ratio_is_one_for_self_distillation() {
        let student = ModelParams::init_mlp(&[2, 16, 3], 5).unwrap();
        let teacher = Teacher::new(student.clone(), TeacherEmulation::AsTrained).unwrap();
        let x = Tensor::from_rows(&[
            vec![0.2, 0.3],
            vec![0.7, 0.6],
            vec![0.5, 0.1],
            vec![0.9, 0.9],
        ])
        .unwrap();
        let y = vec![0, 1, 2, 1];
        let cfg = AttackConfig::eval(0.1, 10);
        let r = tas_ratio(&student, &teacher, &x, &y, &cfg, &cfg, 1.0).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.per_sample_score.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn tas_ratio_with_inert_student_attack() {
        let student = ModelParams::init_mlp(&[2, 16, 3], 5).unwrap();
        let teacher = Teacher::new(
            ModelParams::init_mlp(&[2, 16, 3], 6).unwrap(),
            TeacherEmulation::AsTrained,
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.3], vec![0.7, 0.6], vec![0.5, 0.1]]).unwrap();
        let y = vec![0, 1, 2];
        let zero = AttackConfig::eval(0.0, 10);
        let teacher_cfg = AttackConfig::eval(0.0, 10);
        let r = tas_ratio(&student, &teacher, &x, &y, &zero, &teacher_cfg, 1.0).unwrap();
        assert!(r.per_sample_score.iter().all(|&s| s <= 0.0));
        assert!(matches!(
            tas_ratio(
                &student,
                &teacher,
                &x,
                &y,
                &zero,
                &AttackConfig::eval(0.1, 10),
                1.0
            ),
            Err(Error::Config(_))
        ));
    }
}
