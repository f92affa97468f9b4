#[allow(dead_code, unused_imports)]
#[path = "../saad_algebra.rs"]
mod suite;

use adlab::rng::seeded;
use rand::Rng as _;

use crate::{ensure, Outcome};

fn checks() -> String {
    suite::beta_zero_saadc_checkpoints_equal_saad();
    suite::clean_term_vanishes_for_uniform_teacher();
    String::new()
}

pub fn run() -> Outcome {
    crate::guard(checks)?;
    let mut rng = seeded(0xA16);
    for case in 0..500 {
        let n = rng.random_range(1..8);
        let per: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.3)).collect();
        let scale = rng.random_range(0.0..10.0);
        ensure!(suite::homogeneity_holds(&per, &w, scale), "homogeneity fails in case {case}");

        let c = rng.random_range(2..9);
        let sharp = rng.random_range(0.5..20.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.0f64..1.0).powf(sharp)).collect();
                let s: f64 = r.iter().sum();
                if s > 0.0 { r.iter().map(|v| v / s).collect() } else { vec![1.0 / c as f64; c] }
            })
            .collect();
        ensure!(suite::weights_in_range(&rows), "weights leave [0, log C] in case {case}");
    }
    Ok("β=0 checkpoints bitwise equal to SAAD; clean term vanishes at w̃≡1; homogeneity and w∈[0,log C] over 500 cases".into())
}
