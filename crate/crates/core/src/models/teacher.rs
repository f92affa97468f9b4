use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Classifier, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax, ProbBatch, Tensor};

/// How a trained teacher's outputs are reshaped before use as supervision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TeacherEmulation {
    #[default]
    AsTrained,
    /// `softmax(log p / temperature)`; temperatures below one sharpen.
    TemperatureSharpened { temperature: f64 },
    /// `(1 − alpha)·p + alpha·one_hot(y)`.
    LabelInterpolated { alpha: f64 },
}

impl TeacherEmulation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TeacherEmulation::AsTrained => Ok(()),
            TeacherEmulation::TemperatureSharpened { temperature } => {
                if temperature.is_finite() && temperature > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "temperature must be positive, got {temperature}"
                    )))
                }
            }
            TeacherEmulation::LabelInterpolated { alpha } => {
                if (0.0..=1.0).contains(&alpha) {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "alpha must lie in [0, 1], got {alpha}"
                    )))
                }
            }
        }
    }
}

/// Applies an emulation to teacher probabilities.
pub fn emulate_teacher(
    probs: &ProbBatch,
    labels: &[usize],
    emu: TeacherEmulation,
) -> Result<ProbBatch> {
    emu.validate()?;
    match emu {
        TeacherEmulation::AsTrained => Ok(probs.clone()),
        TeacherEmulation::TemperatureSharpened { temperature } => {
            softmax(&probs.log_tensor().map(|v| v / temperature))
        }
        TeacherEmulation::LabelInterpolated { alpha } => {
            if labels.len() != probs.rows() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    probs.rows()
                )));
            }
            let c = probs.cols();
            let mut out = probs.values().to_vec();
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Contract(format!("label {y} out of range")));
                }
                for (j, v) in out[i * c..(i + 1) * c].iter_mut().enumerate() {
                    let hot = if j == y { 1.0 } else { 0.0 };
                    *v = (1.0 - alpha) * *v + alpha * hot;
                }
            }
            ProbBatch::new(probs.rows(), c, out)
        }
    }
}

/// A frozen teacher with an output emulation and call counters.
///
/// The counters record forward passes and backward passes that propagate
/// gradient through the teacher's layers; clones share them.
#[derive(Clone, Debug)]
pub struct Teacher {
    params: ModelParams,
    emulation: TeacherEmulation,
    forward_calls: Arc<AtomicUsize>,
    backward_calls: Arc<AtomicUsize>,
}

impl Teacher {
    pub fn new(params: ModelParams, emulation: TeacherEmulation) -> Result<Self> {
        emulation.validate()?;
        Ok(Teacher {
            params,
            emulation,
            forward_calls: Arc::default(),
            backward_calls: Arc::default(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn emulation(&self) -> TeacherEmulation {
        self.emulation
    }

    /// Same weights, different emulation, fresh counters.
    pub fn with_emulation(&self, emulation: TeacherEmulation) -> Result<Self> {
        Teacher::new(self.params.clone(), emulation)
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn backward_calls(&self) -> usize {
        self.backward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
        self.backward_calls.store(0, Ordering::Relaxed);
    }
}

impl Classifier for Teacher {
    /// Effective logits: raw, divided by the temperature, or the log of the
    /// label-interpolated distribution.
    fn logits_on(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let start = tape.len();
        let z = self.params.forward(tape, x)?;
        let out = match self.emulation {
            TeacherEmulation::AsTrained => z,
            TeacherEmulation::LabelInterpolated { alpha: 0.0 } => z,
            TeacherEmulation::TemperatureSharpened { temperature } => {
                tape.scale(z, 1.0 / temperature)
            }
            TeacherEmulation::LabelInterpolated { alpha } => {
                let p = tape.softmax(z)?;
                let kept = tape.scale(p, 1.0 - alpha);
                let hot = Tensor::one_hot(labels, self.classes())?.map(|v| alpha * v);
                let hot = tape.constant(hot);
                let mixed = tape.add(kept, hot)?;
                tape.log_clamped(mixed)
            }
        };
        tape.watch(start..tape.len(), self.backward_calls.clone());
        Ok(out)
    }

    fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    fn classes(&self) -> usize {
        self.params.classes()
    }
}
