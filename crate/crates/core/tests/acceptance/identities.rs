use adlab::diagnostics::{lemma2_check, tas_score};
use adlab::rng::{seeded, Rng};
use adlab::tensor::{ProbBatch, PROB_FLOOR};
use adlab::variance::decompose_point;
use rand::Rng as _;

use crate::{ensure, Outcome};

/// Random simplex point; `sharp` raises entries to a power to reach
/// near-vertex distributions.
fn draw(rng: &mut Rng, c: usize, sharp: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..c)
        .map(|_| rng.random_range(1e-3f64..1.0).powf(sharp))
        .collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn ce(y: &[f64], q: &[f64]) -> f64 {
    -y.iter().zip(q).map(|(a, b)| if *a > 0.0 { a * b.max(PROB_FLOOR).ln() } else { 0.0 }).sum::<f64>()
}

pub fn decomposition() -> Outcome {
    let mut rng = seeded(0x1E1);
    let mut worst: f64 = 0.0;
    for draw_i in 0..10_000 {
        let n = [1, 2, 5][draw_i % 3];
        let c = rng.random_range(2..11);
        let sharp = rng.random_range(0.5..6.0);
        let y = draw(&mut rng, c, sharp);
        let preds: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng, c, sharp)).collect();
        let refs: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
        let mean_ce = preds.iter().map(|p| ce(&y, p)).sum::<f64>() / n as f64;
        let d = decompose_point(&y, &refs).map_err(|e| e.to_string())?;
        let err = (mean_ce - (d.noise + d.bias + d.variance)).abs();
        ensure!(err < 1e-8, "draw {draw_i}: |CE − (noise+bias+var)| = {err:e}");
        worst = worst.max(err);
    }
    Ok(format!("10000 draws, N∈{{1,2,5}}, max residual {worst:.2e}"))
}

pub fn tas_bound() -> Outcome {
    let mut rng = seeded(0x1E2);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..10_000 {
        let c = rng.random_range(2..11);
        let sharp = rng.random_range(0.5..8.0);
        let p = draw(&mut rng, c, sharp);
        let f = draw(&mut rng, c, sharp);
        let mut q = draw(&mut rng, c, sharp);
        let floor = 1e-6;
        q.iter_mut().for_each(|v| *v = v.max(floor));
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= s);
        if q.iter().cloned().fold(1.0, f64::min) < floor {
            continue;
        }
        let pb = ProbBatch::from_rows(std::slice::from_ref(&p)).map_err(|e| e.to_string())?;
        let fb = ProbBatch::from_rows(&[f]).map_err(|e| e.to_string())?;
        let qb = ProbBatch::from_rows(&[q.clone()]).map_err(|e| e.to_string())?;
        let score = tas_score(&pb, &fb, &qb).map_err(|e| e.to_string())?;
        let ok = lemma2_check(&pb, &qb, &score).map_err(|e| e.to_string())?;
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let m = q.iter().cloned().fold(1.0, f64::min);
        tightest = tightest.min(score[0] - (h + m.ln()));
        if !ok[0] || score[0] < h + m.ln() - 1e-9 {
            violations += 1;
        }
    }
    ensure!(violations == 0, "{violations} violations of the entropy bound");
    Ok(format!("10000 triples, 0 violations, min slack {tightest:.3e}"))
}
