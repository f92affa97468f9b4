use adlab::autodiff::Tape;
use adlab::diagnostics::{entropy_histogram, lemma2_check, robust_overfitting, tas_score, TasReport};
use adlab::models::{decode_checkpoint, emulate_teacher, encode_checkpoint, ModelParams, TeacherEmulation};
use adlab::tensor::{entropy, softmax, ProbBatch, Tensor, PROB_FLOOR};
use adlab::train::{lr_at, TrainConfig};
use adlab::losses::DistillMethod;
use adlab::variance::{decompose_point, geometric_mean_simplex, SplitPlan};
use proptest::prelude::*;

fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, c).prop_map(move |v| {
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            vec![1.0 / c as f64; c]
        } else {
            v.iter().map(|x| x / s).collect()
        }
    })
}

fn batch(rows: usize, c: usize) -> impl Strategy<Value = ProbBatch> {
    prop::collection::vec(simplex(c), rows).prop_map(|r| ProbBatch::from_rows(&r).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_clamped_simplex(
        rows in 1usize..5, c in 2usize..7, scale in 0.1f64..200.0, seed in any::<u64>()
    ) {
        let mut s = seed;
        let data: Vec<f64> = (0..rows * c).map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
        }).collect();
        let p = softmax(&Tensor::matrix(rows, c, data).unwrap()).unwrap();
        for i in 0..rows {
            let r = p.row(i);
            prop_assert!(r.iter().all(|&v| (PROB_FLOOR..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unused_nodes_get_zero_gradient(vals in prop::collection::vec(-3.0f64..3.0, 6)) {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vals.clone()).unwrap(), true);
        let b = tape.leaf(Tensor::matrix(2, 3, vals).unwrap(), true);
        let _unused = tape.relu(b);
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        let gb = tape.grad(b).unwrap();
        prop_assert!(gb.data().iter().all(|&g| g == 0.0));
        prop_assert_eq!(gb.shape(), &[2, 3]);
    }

    #[test]
    fn sharpening_keeps_argmax_and_tempering_raises_entropy(
        p in batch(3, 4), t1 in 0.05f64..1.0, t2 in 0.05f64..1.0
    ) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let labels = [0, 1, 2];
        let a = emulate_teacher(&p, &labels, TeacherEmulation::TemperatureSharpened { temperature: lo }).unwrap();
        let b = emulate_teacher(&p, &labels, TeacherEmulation::TemperatureSharpened { temperature: hi }).unwrap();
        for i in 0..3 {
            let r = p.row(i);
            let top = r.iter().cloned().fold(f64::MIN, f64::max);
            let am = a.argmax_rows()[i];
            prop_assert!(r[am] >= top - 1e-12);
        }
        for (ha, hb) in entropy(&a).iter().zip(entropy(&b)) {
            prop_assert!(*ha <= hb + 1e-9);
        }
    }

    #[test]
    fn interpolation_stays_on_simplex(p in batch(3, 5), alpha in 0.0f64..=1.0) {
        let q = emulate_teacher(&p, &[4, 0, 2], TeacherEmulation::LabelInterpolated { alpha }).unwrap();
        for i in 0..3 {
            prop_assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tas_flags_follow_scores(p in batch(6, 3), clean in batch(6, 3), adv in batch(6, 3)) {
        let s = tas_score(&p, &clean, &adv).unwrap();
        let rep = TasReport::from_scores(s.clone(), entropy(&p));
        for (flag, sc) in rep.is_tas.iter().zip(&s) {
            prop_assert_eq!(*flag, *sc >= 0.0);
        }
        let hits = rep.is_tas.iter().filter(|&&b| b).count() as f64;
        prop_assert_eq!(rep.ratio, hits / 6.0);
        prop_assert!(lemma2_check(&p, &adv, &s).unwrap().into_iter().all(|b| b));
    }

    #[test]
    fn histogram_counts_and_density(h in prop::collection::vec(0.0f64..=1.6, 1..60), bins in 1usize..60) {
        let hist = entropy_histogram(&h, 5, bins).unwrap();
        prop_assert_eq!(hist.counts.iter().sum::<usize>(), h.len());
        let width = hist.bin_edges[1] - hist.bin_edges[0];
        let mass: f64 = hist.density.iter().map(|d| d * width).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decomposition_terms_are_nonnegative_and_add_up(
        y in simplex(4), preds in prop::collection::vec(simplex(4), 1..6)
    ) {
        let refs: Vec<&[f64]> = preds.iter().map(|v| v.as_slice()).collect();
        let d = decompose_point(&y, &refs).unwrap();
        prop_assert!(d.noise >= 0.0 && d.bias >= 0.0 && d.variance >= 0.0);
        prop_assert!((d.risk - (d.noise + d.bias + d.variance)).abs() < 1e-8);
        let g = geometric_mean_simplex(&refs).unwrap();
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn partitions_are_disjoint_and_cover(n in 1usize..300, splits in 1usize..6, k in 0usize..4, seed in any::<u64>()) {
        let plan = SplitPlan { splits, repetitions: 4, seed };
        let (parts, dropped) = plan.partition(n, k);
        let mut all: Vec<usize> = parts.iter().flatten().chain(&dropped).copied().collect();
        prop_assert!(dropped.len() < splits);
        prop_assert!(parts.iter().all(|p| p.len() == n / splits));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoints_round_trip(sizes in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
        let m = ModelParams::init_mlp(&sizes, seed).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn robust_overfitting_is_nonnegative(curve in prop::collection::vec(0.0f64..=100.0, 1..40)) {
        let ro = robust_overfitting(&curve).unwrap();
        prop_assert!((0.0..=100.0).contains(&ro));
    }

    #[test]
    fn lr_schedule_is_monotone(epochs in 1usize..200) {
        let cfg = TrainConfig::new(DistillMethod::Saad, 0.05).with_epochs(epochs);
        cfg.validate().unwrap();
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_at(&cfg, e).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lr_at(&cfg, epochs).is_err());
    }
}
