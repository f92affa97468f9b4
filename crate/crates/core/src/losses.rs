//! Outer-minimization objectives for adversarial training and distillation,
//! including the entropy-weighted SAAD / SAAD-C losses.
//!
//! Per-sample losses are `r × 1` columns on a [`Tape`]; batch reduction is
//! the arithmetic mean.

use serde::{Deserialize, Serialize};

use crate::attacks::InnerLoss;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{BoundParams, Classifier, Teacher};
use crate::tensor::{entropy, ProbBatch, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMethod {
    PgdAt,
    Trades,
    Ard,
    Rslad,
    Adaad,
    Igdm,
    Saad,
    SaadC,
}

impl DistillMethod {
    pub const ALL: [DistillMethod; 8] = [
        DistillMethod::PgdAt,
        DistillMethod::Trades,
        DistillMethod::Ard,
        DistillMethod::Rslad,
        DistillMethod::Adaad,
        DistillMethod::Igdm,
        DistillMethod::Saad,
        DistillMethod::SaadC,
    ];

    /// Inner loss each method pairs with its outer objective.
    pub fn default_inner_loss(self) -> InnerLoss {
        match self {
            DistillMethod::PgdAt | DistillMethod::Ard => InnerLoss::CeStudent,
            DistillMethod::Trades => InnerLoss::KlStudentClean,
            DistillMethod::Rslad => InnerLoss::KlTeacherClean,
            DistillMethod::Adaad | DistillMethod::Igdm => InnerLoss::KlTeacherAdv,
            DistillMethod::Saad | DistillMethod::SaadC => InnerLoss::FastFirstOrder,
        }
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, DistillMethod::PgdAt | DistillMethod::Trades)
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, DistillMethod::Saad | DistillMethod::SaadC)
    }
}

/// Per-sample weighting applied by the SAAD family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Entropy,
    Unit,
}

fn default_alpha_igdm() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.2
}
fn default_trades_lambda() -> f64 {
    6.0
}
fn default_lambda_in() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub method: DistillMethod,
    #[serde(default = "default_alpha_igdm")]
    pub alpha_igdm: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_trades_lambda")]
    pub trades_lambda: f64,
    /// Weight of the first-order teacher-logit correction in the fast attack.
    #[serde(default = "default_lambda_in")]
    pub lambda_in: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

impl DistillSpec {
    pub fn new(method: DistillMethod) -> Self {
        DistillSpec {
            method,
            alpha_igdm: default_alpha_igdm(),
            beta: default_beta(),
            trades_lambda: default_trades_lambda(),
            lambda_in: default_lambda_in(),
            weighting: Weighting::Entropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_igdm >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha_igdm and beta must be ≥ 0".into()));
        }
        if !(self.trades_lambda > 0.0) {
            return Err(Error::Config("trades_lambda must be > 0".into()));
        }
        if !self.lambda_in.is_finite() {
            return Err(Error::Config("lambda_in must be finite".into()));
        }
        Ok(())
    }
}

/// Raw entropy weights `w` and their normalization `w̃ = w / log C`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub w_tilde: Vec<f64>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn unit(n: usize) -> Self {
        WeightVector {
            w: vec![1.0; n],
            w_tilde: vec![1.0; n],
        }
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len().max(1) as f64
    }
}

/// Teacher entropy on the student-attacked inputs, one weight per row.
pub fn entropy_weights(teacher_adv_probs: &ProbBatch) -> WeightVector {
    let max = (teacher_adv_probs.cols() as f64).ln();
    let w: Vec<f64> = entropy(teacher_adv_probs)
        .into_iter()
        .map(|h| h.min(max))
        .collect();
    let w_tilde = w
        .iter()
        .map(|&h| if max > 0.0 { h / max } else { 0.0 })
        .collect();
    WeightVector { w, w_tilde }
}

fn column(tape: &mut Tape, values: &[f64]) -> Var {
    tape.constant(Tensor::matrix(values.len(), 1, values.to_vec()).expect("non-empty column"))
}

fn check_len(tape: &Tape, per_sample: Var, n: usize, what: &str) -> Result<()> {
    let (r, c) = tape.value(per_sample).dims2();
    if r != n || c != 1 {
        return Err(Error::Contract(format!(
            "{what}: {r}x{c} per-sample losses against {n} weights"
        )));
    }
    Ok(())
}

/// `mean_i w_i · L_AD,i` with raw entropy weights.
pub fn saad_loss(tape: &mut Tape, per_sample: Var, weights: &WeightVector) -> Result<Var> {
    check_len(tape, per_sample, weights.len(), "saad_loss")?;
    let w = column(tape, &weights.w);
    let weighted = tape.mul(w, per_sample)?;
    Ok(tape.mean(weighted))
}

/// SAAD plus `β · mean_i (1 − w̃_i) · KL(f_T(x_i) ‖ f_S(x_i))`.
pub fn saadc_loss(
    tape: &mut Tape,
    per_sample: Var,
    weights: &WeightVector,
    clean_kl: Var,
    beta: f64,
) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::Contract(format!("beta must be ≥ 0, got {beta}")));
    }
    check_len(tape, clean_kl, weights.len(), "saadc_loss clean term")?;
    let robust = saad_loss(tape, per_sample, weights)?;
    let inverse: Vec<f64> = weights.w_tilde.iter().map(|w| 1.0 - w).collect();
    let inv = column(tape, &inverse);
    let clean = tape.mul(inv, clean_kl)?;
    let clean = tape.mean(clean);
    let clean = tape.scale(clean, beta);
    tape.add(robust, clean)
}

/// `KL(f_T(x) ‖ f_S(x))` per sample, teacher held constant.
pub fn clean_kl(
    tape: &mut Tape,
    student: &BoundParams,
    teacher: &Teacher,
    x: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let zt = teacher.logits(x, labels)?;
    let t = tape.constant(zt);
    let xv = tape.constant(x.clone());
    let zs = student.forward(tape, xv)?;
    tape.kl_logits(t, zs)
}

/// Per-sample distillation loss of a teacher-based method.
///
/// For `igdm` (and the SAAD family, which builds on it) the gradient-matching
/// term is `α · KL(softmax(ℓ_T(x_adv) − ℓ_T(x)) ‖ softmax(ℓ_S(x_adv) − ℓ_S(x)))`
/// on raw logits.
pub fn base_ad_loss(
    tape: &mut Tape,
    student: &BoundParams,
    teacher: &Teacher,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    spec: &DistillSpec,
) -> Result<Var> {
    let xa = tape.constant(x_adv.clone());
    let zs_adv = student.forward(tape, xa)?;
    match spec.method {
        DistillMethod::Ard | DistillMethod::Rslad => {
            let t = tape.constant(teacher.logits(x, labels)?);
            tape.kl_logits(t, zs_adv)
        }
        DistillMethod::Adaad => {
            let t = tape.constant(teacher.logits(x_adv, labels)?);
            tape.kl_logits(t, zs_adv)
        }
        DistillMethod::Igdm | DistillMethod::Saad | DistillMethod::SaadC => {
            let zt_adv = teacher.logits(x_adv, labels)?;
            let zt_clean = teacher.logits(x, labels)?;
            let t_adv = tape.constant(zt_adv.clone());
            let kl_adv = tape.kl_logits(t_adv, zs_adv)?;
            let t_diff = tape.constant(zt_adv.zip_map(&zt_clean, |a, b| a - b)?);
            let xc = tape.constant(x.clone());
            let zs_clean = student.forward(tape, xc)?;
            let s_diff = tape.sub(zs_adv, zs_clean)?;
            let kl_diff = tape.kl_logits(t_diff, s_diff)?;
            let scaled = tape.scale(kl_diff, spec.alpha_igdm);
            tape.add(kl_adv, scaled)
        }
        DistillMethod::PgdAt | DistillMethod::Trades => Err(Error::Config(format!(
            "{:?} is not a distillation method",
            spec.method
        ))),
    }
}

/// `CE(y, f_S(x_adv))` batch mean.
pub fn pgd_at_loss(
    tape: &mut Tape,
    student: &BoundParams,
    x_adv: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let classes = tape.value(*student.biases.last().unwrap()).cols();
    let t = tape.constant(Tensor::one_hot(labels, classes)?);
    let xa = tape.constant(x_adv.clone());
    let z = student.forward(tape, xa)?;
    let ce = tape.cross_entropy(t, z)?;
    Ok(tape.mean(ce))
}

/// `mean[CE(y, f_S(x)) + λ · KL(f_S(x) ‖ f_S(x_adv))]`, both sides differentiated.
pub fn trades_loss(
    tape: &mut Tape,
    student: &BoundParams,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    let classes = tape.value(*student.biases.last().unwrap()).cols();
    let t = tape.constant(Tensor::one_hot(labels, classes)?);
    let xc = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let zc = student.forward(tape, xc)?;
    let za = student.forward(tape, xa)?;
    let ce = tape.cross_entropy(t, zc)?;
    let kl = tape.kl_logits(zc, za)?;
    let kl = tape.scale(kl, lambda);
    let total = tape.add(ce, kl)?;
    Ok(tape.mean(total))
}

/// Scalar training objective for any method, plus the weights it applied.
pub struct OuterLoss {
    pub loss: Var,
    pub weights: WeightVector,
}

pub fn outer_loss(
    tape: &mut Tape,
    student: &BoundParams,
    teacher: Option<&Teacher>,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    spec: &DistillSpec,
) -> Result<OuterLoss> {
    let n = labels.len();
    let need =
        || teacher.ok_or_else(|| Error::Config(format!("{:?} requires a teacher", spec.method)));
    let (loss, weights) = match spec.method {
        DistillMethod::PgdAt => (
            pgd_at_loss(tape, student, x_adv, labels)?,
            WeightVector::unit(n),
        ),
        DistillMethod::Trades => (
            trades_loss(tape, student, x, x_adv, labels, spec.trades_lambda)?,
            WeightVector::unit(n),
        ),
        DistillMethod::Ard | DistillMethod::Rslad | DistillMethod::Adaad | DistillMethod::Igdm => {
            let base = base_ad_loss(tape, student, need()?, x, x_adv, labels, spec)?;
            (tape.mean(base), WeightVector::unit(n))
        }
        DistillMethod::Saad | DistillMethod::SaadC => {
            let teacher = need()?;
            let weights = match spec.weighting {
                Weighting::Entropy => entropy_weights(&teacher.probs(x_adv, labels)?),
                Weighting::Unit => WeightVector::unit(n),
            };
            let base = base_ad_loss(tape, student, teacher, x, x_adv, labels, spec)?;
            let loss = if spec.method == DistillMethod::Saad {
                saad_loss(tape, base, &weights)?
            } else {
                let ckl = clean_kl(tape, student, teacher, x, labels)?;
                saadc_loss(tape, base, &weights, ckl, spec.beta)?
            };
            (loss, weights)
        }
    };
    Ok(OuterLoss { loss, weights })
}
