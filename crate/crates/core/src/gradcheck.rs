//! Central finite-difference checking of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-input relative error `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub max_rel_err: f64,
    /// Smallest |pre-activation| fed to a ReLU on the unperturbed pass.
    pub relu_margin: f64,
}

impl GradCheckReport {
    /// True when no ReLU input lies within `distance` of its kink.
    pub fn away_from_kinks(&self, distance: f64) -> bool {
        self.relu_margin >= distance
    }
}

/// Compares backward gradients of a scalar function against central differences.
///
/// `f` must build the same computation for any input values; inputs are
/// registered as gradient-requiring leaves in order.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let relu_margin = tape.relu_margin();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad"))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };

    let mut max_rel_err: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for e in 0..probe[k].numel() {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric("non-finite finite difference".into()));
            }
            let an = a.data()[e];
            diff2 += (an - numeric).powi(2);
            an2 += an * an;
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        let rel = if denom < 1e-10 {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err,
        relu_margin,
    })
}
