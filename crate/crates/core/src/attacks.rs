//! Inner maximization: FGSM, L∞ PGD with selectable inner loss, and the fast
//! first-order attack that corrects the teacher's true-class logit instead of
//! re-running the teacher at every step.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Classifier, Teacher};
use crate::rng;
use crate::tensor::Tensor;

/// Objective maximized by the attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerLoss {
    /// `CE(y, f_S(x+δ))`
    CeStudent,
    /// `KL(f_S(x) ‖ f_S(x+δ))`
    KlStudentClean,
    /// `KL(f_T(x) ‖ f_S(x+δ))`
    KlTeacherClean,
    /// `KL(f_T(x+δ) ‖ f_S(x+δ))`, differentiating through the teacher.
    KlTeacherAdv,
    /// `KL(softmax(ℓ_T + λ⟨∇ℓ_T^y, δ⟩ e_y) ‖ f_S(x+δ))`
    FastFirstOrder,
}

impl InnerLoss {
    pub fn needs_teacher(self) -> bool {
        matches!(
            self,
            InnerLoss::KlTeacherClean | InnerLoss::KlTeacherAdv | InnerLoss::FastFirstOrder
        )
    }
}

fn default_init_scale() -> f64 {
    0.001
}

fn default_box() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ budget in input units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Std of the Gaussian initial perturbation; zero starts at δ = 0.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// `None` lets the caller choose (training uses the method's own).
    #[serde(default)]
    pub inner_loss: Option<InnerLoss>,
    #[serde(default = "default_box")]
    pub input_box: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    /// Evaluation convention: zero init, `η = ε/4`, CE on the attacked model.
    pub fn eval(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            steps,
            init_scale: 0.0,
            inner_loss: Some(InnerLoss::CeStudent),
            input_box: default_box(),
            seed: 0,
        }
    }

    /// Training convention: Gaussian init of std 0.001, `η = ε/4`, ten steps.
    pub fn train(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            steps: 10,
            init_scale: default_init_scale(),
            inner_loss: None,
            input_box: default_box(),
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AttackConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_inner_loss(&self, inner: InnerLoss) -> Self {
        AttackConfig {
            inner_loss: Some(inner),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.input_box;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be ≥ 0, got {}",
                self.epsilon
            )));
        }
        if self.steps > 0
            && self.epsilon > 0.0
            && !(self.step_size > 0.0 && self.step_size.is_finite())
        {
            return Err(Error::Config(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be ≥ 0".into()));
        }
        if !(lo < hi) {
            return Err(Error::Config(format!("empty input box [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Adversarial inputs together with the perturbation that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedBatch {
    pub x_adv: Tensor,
    pub delta: Tensor,
    /// Mean inner loss at the start of each iteration.
    pub loss_trace: Vec<f64>,
}

/// Elementwise clamp to `[−ε, ε]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.map(|d| d.clamp(-epsilon, epsilon))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `delta` onto the ball, then makes `x + delta` lie in the box.
fn make_feasible(x: &Tensor, delta: &Tensor, cfg: &AttackConfig) -> Tensor {
    let [lo, hi] = cfg.input_box;
    let ball = project_linf(delta, cfg.epsilon);
    x.zip_map(&ball, |xi, di| (xi + di).clamp(lo, hi) - xi)
        .expect("same shape")
}

fn finish(x: &Tensor, delta: Tensor, loss_trace: Vec<f64>, cfg: &AttackConfig) -> PerturbedBatch {
    let [lo, hi] = cfg.input_box;
    let x_adv = x
        .zip_map(&delta, |xi, di| (xi + di).clamp(lo, hi))
        .expect("same shape");
    PerturbedBatch {
        x_adv,
        delta,
        loss_trace,
    }
}

fn initial_delta(x: &Tensor, cfg: &AttackConfig) -> Tensor {
    if cfg.init_scale == 0.0 {
        return Tensor::zeros(x.shape());
    }
    let mut rng = rng::seeded(cfg.seed);
    let noise = x.map(|_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        cfg.init_scale * z
    });
    make_feasible(x, &noise, cfg)
}

/// Signed-gradient ascent on an arbitrary per-row objective.
///
/// `objective` receives the tape and the perturbed input `x + δ` and must
/// return an `r × 1` column of per-sample losses. Samples are assumed
/// independent, so the gradient of the summed loss is per-sample.
pub fn pgd_with_loss<F>(x: &Tensor, cfg: &AttackConfig, mut objective: F) -> Result<PerturbedBatch>
where
    F: FnMut(&mut Tape, Var, Var) -> Result<Var>,
{
    cfg.validate()?;
    let mut delta = initial_delta(x, cfg);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let d = tape.leaf(delta.clone(), true);
        let xa = tape.add(xv, d)?;
        let per_row = objective(&mut tape, xa, d)?;
        let rows = tape.value(per_row);
        trace.push(rows.data().iter().sum::<f64>() / rows.numel() as f64);
        let total = tape.sum(per_row);
        tape.backward(total)?;
        let g = tape.grad(d).expect("delta requires grad");
        let stepped = delta
            .zip_map(&g, |di, gi| di + cfg.step_size * sign(gi))
            .expect("same shape");
        delta = make_feasible(x, &stepped, cfg);
    }
    Ok(finish(x, delta, trace, cfg))
}

fn check_batch<M: Classifier + ?Sized>(model: &M, x: &Tensor, labels: &[usize]) -> Result<()> {
    let (r, d) = x.dims2();
    if d != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input width {d} but model expects {}",
            model.input_dim()
        )));
    }
    if labels.len() != r {
        return Err(Error::Dimension(format!(
            "{} labels for {r} rows",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.classes()) {
        return Err(Error::Contract(format!("label {y} out of range")));
    }
    Ok(())
}

/// Single signed-gradient step of size ε from the clean input.
pub fn fgsm<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<PerturbedBatch> {
    check_batch(model, x, labels)?;
    let single = AttackConfig {
        step_size: cfg.epsilon.max(f64::MIN_POSITIVE),
        steps: 1,
        init_scale: 0.0,
        ..cfg.clone()
    };
    let onehot = Tensor::one_hot(labels, model.classes())?;
    pgd_with_loss(x, &single, |tape, xa, _| {
        let t = tape.constant(onehot.clone());
        let z = model.logits_on(tape, xa, labels)?;
        tape.cross_entropy(t, z)
    })
}

/// Multi-step L∞ PGD on `student` with the inner loss from `cfg`
/// (cross-entropy when unset).
///
/// [`InnerLoss::FastFirstOrder`] is not handled here; use [`fast_inner_max`]
/// or [`craft`].
pub fn pgd<S: Classifier + ?Sized>(
    student: &S,
    teacher: Option<&Teacher>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<PerturbedBatch> {
    check_batch(student, x, labels)?;
    let inner = cfg.inner_loss.unwrap_or(InnerLoss::CeStudent);
    let need_teacher =
        || teacher.ok_or_else(|| Error::Config(format!("inner loss {inner:?} requires a teacher")));
    match inner {
        InnerLoss::CeStudent => {
            let onehot = Tensor::one_hot(labels, student.classes())?;
            pgd_with_loss(x, cfg, |tape, xa, _| {
                let t = tape.constant(onehot.clone());
                let z = student.logits_on(tape, xa, labels)?;
                tape.cross_entropy(t, z)
            })
        }
        InnerLoss::KlStudentClean => {
            let clean = student.logits(x, labels)?;
            pgd_with_loss(x, cfg, |tape, xa, _| {
                let t = tape.constant(clean.clone());
                let z = student.logits_on(tape, xa, labels)?;
                tape.kl_logits(t, z)
            })
        }
        InnerLoss::KlTeacherClean => {
            let teacher = need_teacher()?;
            check_batch(teacher, x, labels)?;
            let clean = teacher.logits(x, labels)?;
            pgd_with_loss(x, cfg, |tape, xa, _| {
                let t = tape.constant(clean.clone());
                let z = student.logits_on(tape, xa, labels)?;
                tape.kl_logits(t, z)
            })
        }
        InnerLoss::KlTeacherAdv => {
            let teacher = need_teacher()?;
            check_batch(teacher, x, labels)?;
            pgd_with_loss(x, cfg, |tape, xa, _| {
                let t = teacher.logits_on(tape, xa, labels)?;
                let z = student.logits_on(tape, xa, labels)?;
                tape.kl_logits(t, z)
            })
        }
        InnerLoss::FastFirstOrder => Err(Error::Config(
            "fast-first-order is driven by fast_inner_max, not pgd".into(),
        )),
    }
}

/// Teacher logits at `x` and the input gradient of each row's true-class
/// logit: one teacher forward and one teacher backward.
pub fn teacher_first_order(
    teacher: &Teacher,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Tensor)> {
    check_batch(teacher, x, labels)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let z = teacher.logits_on(&mut tape, xv, labels)?;
    let true_class = tape.select_cols(z, labels)?;
    let s = tape.sum(true_class);
    tape.backward(s)?;
    let grad = tape.grad(xv).expect("input requires grad");
    Ok((tape.value(z).clone(), grad))
}

fn corrected_logits_on(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    teacher_grad: &Tensor,
    onehot: &Tensor,
    delta: Var,
    lambda_in: f64,
) -> Result<Var> {
    let g = tape.constant(teacher_grad.clone());
    let gd = tape.mul(g, delta)?;
    let dot = tape.sum_rows(gd);
    let correction = tape.scale(dot, lambda_in);
    let hot = tape.constant(onehot.clone());
    let shift = tape.mul_col(hot, correction)?;
    let base = tape.constant(teacher_logits.clone());
    tape.add(base, shift)
}

/// `ℓ_T` with the true-class entry replaced by `ℓ_T^y + λ⟨∇ₓℓ_T^y(x), δ⟩`.
pub fn corrected_teacher_logits(
    teacher_logits: &Tensor,
    teacher_grad: &Tensor,
    delta: &Tensor,
    labels: &[usize],
    lambda_in: f64,
) -> Result<Tensor> {
    if teacher_grad.shape() != delta.shape() {
        return Err(Error::Contract(
            "gradient and perturbation shapes differ".into(),
        ));
    }
    let onehot = Tensor::one_hot(labels, teacher_logits.cols())?;
    let mut tape = Tape::new();
    let d = tape.constant(delta.clone());
    let v = corrected_logits_on(
        &mut tape,
        teacher_logits,
        teacher_grad,
        &onehot,
        d,
        lambda_in,
    )?;
    Ok(tape.value(v).clone())
}

/// Fast inner maximization with a first-order correction of the teacher's
/// true-class logit. The teacher is never evaluated inside the loop.
pub fn fast_inner_max<S: Classifier + ?Sized>(
    student: &S,
    teacher_clean_logits: &Tensor,
    teacher_trueclass_grad: &Tensor,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    lambda_in: f64,
) -> Result<PerturbedBatch> {
    check_batch(student, x, labels)?;
    if teacher_trueclass_grad.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "teacher gradient shape {:?} does not match input {:?}",
            teacher_trueclass_grad.shape(),
            x.shape()
        )));
    }
    if teacher_clean_logits.dims2() != (x.rows(), student.classes()) {
        return Err(Error::Contract(format!(
            "teacher logits shape {:?} does not match batch",
            teacher_clean_logits.shape()
        )));
    }
    let onehot = Tensor::one_hot(labels, student.classes())?;
    pgd_with_loss(x, cfg, |tape, xa, d| {
        let t = corrected_logits_on(
            tape,
            teacher_clean_logits,
            teacher_trueclass_grad,
            &onehot,
            d,
            lambda_in,
        )?;
        let z = student.logits_on(tape, xa, labels)?;
        tape.kl_logits(t, z)
    })
}

/// Dispatches to the attack selected by `inner`.
pub fn craft<S: Classifier + ?Sized>(
    student: &S,
    teacher: Option<&Teacher>,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    inner: InnerLoss,
    lambda_in: f64,
) -> Result<PerturbedBatch> {
    match inner {
        InnerLoss::FastFirstOrder => {
            let teacher = teacher.ok_or_else(|| {
                Error::Config("fast-first-order inner loss requires a teacher".into())
            })?;
            let (logits, grad) = teacher_first_order(teacher, x, labels)?;
            fast_inner_max(student, &logits, &grad, x, labels, cfg, lambda_in)
        }
        other => pgd(student, teacher, x, labels, &cfg.with_inner_loss(other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelParams, TeacherEmulation};

    fn batch() -> (Tensor, Vec<usize>) {
        let x = Tensor::from_rows(&[
            vec![0.2, 0.7, 0.5],
            vec![0.9, 0.1, 0.4],
            vec![0.5, 0.5, 0.5],
        ])
        .unwrap();
        (x, vec![0, 1, 2])
    }

    #[test]
    fn project_linf_cases() {
        let eps = 0.1;
        let inside = Tensor::from_rows(&[vec![0.05, -0.1, 0.0]]).unwrap();
        assert_eq!(project_linf(&inside, eps), inside);
        let outside = Tensor::from_rows(&[vec![2.0 * eps, -3.0 * eps]]).unwrap();
        assert_eq!(project_linf(&outside, eps).data(), &[eps, -eps]);
        let once = project_linf(&outside, eps);
        assert_eq!(project_linf(&once, eps), once);
    }

    #[test]
    fn zero_budget_leaves_input_unchanged() {
        let (x, y) = batch();
        let m = ModelParams::init_mlp(&[3, 8, 3], 4).unwrap();
        let cfg = AttackConfig::eval(0.0, 5);
        assert_eq!(fgsm(&m, &x, &y, &cfg).unwrap().x_adv, x);
        let cfg = AttackConfig {
            steps: 0,
            init_scale: 0.0,
            ..AttackConfig::eval(0.1, 0)
        };
        assert_eq!(pgd(&m, None, &x, &y, &cfg).unwrap().x_adv, x);
    }

    #[test]
    fn missing_teacher_is_config_error() {
        let (x, y) = batch();
        let m = ModelParams::init_mlp(&[3, 8, 3], 4).unwrap();
        let cfg = AttackConfig::train(0.1).with_inner_loss(InnerLoss::KlTeacherAdv);
        assert!(matches!(pgd(&m, None, &x, &y, &cfg), Err(Error::Config(_))));
        assert!(matches!(
            craft(&m, None, &x, &y, &cfg, InnerLoss::FastFirstOrder, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fast_rejects_mismatched_gradient() {
        let (x, y) = batch();
        let m = ModelParams::init_mlp(&[3, 8, 3], 4).unwrap();
        let logits = Tensor::zeros(&[3, 3]);
        let bad = Tensor::zeros(&[3, 2]);
        let cfg = AttackConfig::train(0.1);
        assert!(matches!(
            fast_inner_max(&m, &logits, &bad, &x, &y, &cfg, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pgd_is_deterministic_per_seed() {
        let (x, y) = batch();
        let s = ModelParams::init_mlp(&[3, 8, 3], 4).unwrap();
        let t = Teacher::new(
            ModelParams::init_mlp(&[3, 16, 3], 5).unwrap(),
            TeacherEmulation::AsTrained,
        )
        .unwrap();
        let cfg = AttackConfig::train(0.1)
            .with_seed(9)
            .with_inner_loss(InnerLoss::KlTeacherAdv);
        let a = pgd(&s, Some(&t), &x, &y, &cfg).unwrap();
        let b = pgd(&s, Some(&t), &x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let c = pgd(&s, Some(&t), &x, &y, &cfg.with_seed(10)).unwrap();
        assert_ne!(a.loss_trace, c.loss_trace);
    }

    #[test]
    fn quadratic_surrogate_trace_is_non_decreasing() {
        let x = Tensor::from_rows(&[vec![0.3, 0.6, 0.55], vec![0.1, 0.9, 0.5]]).unwrap();
        let centre = Tensor::from_rows(&[vec![0.35, 0.5, 0.5], vec![0.2, 0.7, 0.45]]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.2,
            step_size: 0.03,
            steps: 15,
            init_scale: 0.01,
            inner_loss: None,
            input_box: [0.0, 1.0],
            seed: 4,
        };
        let out = pgd_with_loss(&x, &cfg, |tape, xa, _| {
            let c = tape.constant(centre.clone());
            let diff = tape.sub(xa, c)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.sum_rows(sq))
        })
        .unwrap();
        assert_eq!(out.loss_trace.len(), 15);
        for w in out.loss_trace.windows(2) {
            assert!(w[1] >= w[0], "{:?}", out.loss_trace);
        }
    }
}
