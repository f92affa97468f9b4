use super::ModelParams;
use crate::error::{Error, Result};

/// Uniform running mean of parameter snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwaState {
    averaged: Option<ModelParams>,
    count: usize,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `None` until the first snapshot has been absorbed.
    pub fn averaged(&self) -> Option<&ModelParams> {
        self.averaged.as_ref()
    }

    pub fn into_averaged(self) -> Option<ModelParams> {
        self.averaged
    }

    /// `averaged ← (count·averaged + snapshot) / (count + 1)`.
    pub fn update(&mut self, snapshot: &ModelParams) -> Result<()> {
        match &mut self.averaged {
            None => self.averaged = Some(snapshot.clone()),
            Some(avg) => {
                if !avg.same_architecture(snapshot) {
                    return Err(Error::Contract(format!(
                        "SWA snapshot {:?} does not match {:?}",
                        snapshot.layer_sizes(),
                        avg.layer_sizes()
                    )));
                }
                let n = self.count as f64;
                for (a, s) in avg.tensors_mut().zip(snapshot.tensors()) {
                    for (av, &sv) in a.data_mut().iter_mut().zip(s.data()) {
                        *av += (sv - *av) / (n + 1.0);
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }
}
