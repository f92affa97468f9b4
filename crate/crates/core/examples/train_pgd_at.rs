//! Adversarial training of a small MLP on a 2-D Gaussian mixture, with
//! per-epoch metrics and an SWA copy of the weights.

use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::losses::DistillMethod;
use adlab::models::ModelParams;
use adlab::train::{train, TrainConfig};

fn main() -> adlab::Result<()> {
    let spec = DatasetSpec::synthetic(DatasetKind::GaussianMixture, 4, 150);
    let data = gen_dataset(&spec)?;
    let eps = 0.5 * spec.class_margin;

    let cfg = TrainConfig::new(DistillMethod::PgdAt, eps).with_epochs(12);
    let init = ModelParams::init_mlp(&[2, 32, 4], 0)?;
    let out = train(None, &init, &data.train, &data.test, &cfg)?;

    println!("{}", adlab::train::MetricsRecord::CSV_HEADER);
    for row in &out.metrics.rows {
        println!(
            "{},{:.4},{:.4},{:.1},{:.1},{:.1},{:.1}",
            row.epoch, row.lr, row.train_loss, row.clean_train_acc, row.clean_test_acc,
            row.robust_train_acc, row.robust_test_acc
        );
    }
    if let Some(swa) = &out.swa {
        let ev = adlab::train::evaluate(swa, &data.test, &cfg.eval_attack)?;
        println!("swa: clean {:.1} fgsm {:.1} pgd {:.1}", ev.clean_acc, ev.fgsm_acc, ev.pgd_acc);
    }
    Ok(())
}
