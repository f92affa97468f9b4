//! FGSM and PGD against a naturally trained model; the perturbation stays
//! inside the L∞ ball and the input box.

use adlab::attacks::{fgsm, pgd, AttackConfig};
use adlab::data::{gen_dataset, DatasetKind, DatasetSpec};
use adlab::losses::DistillMethod;
use adlab::models::{Classifier, ModelParams};
use adlab::train::{evaluate, train, TrainConfig};

fn main() -> adlab::Result<()> {
    let spec = DatasetSpec::synthetic(DatasetKind::Concentric, 3, 60);
    let data = gen_dataset(&spec)?;
    let natural = TrainConfig::new(DistillMethod::PgdAt, 0.0).with_epochs(30);
    let model = train(None, &ModelParams::init_mlp(&[2, 32, 3], 4)?, &data.train, &data.test, &natural)?.student;
    let eps = 0.05;
    let cfg = AttackConfig::eval(eps, 20);

    let x = &data.test.x;
    let y = &data.test.labels;
    let one = fgsm(&model, x, y, &cfg)?;
    let many = pgd(&model, None, x, y, &cfg)?;
    let linf = many.delta.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("fgsm |δ|∞ = {:.4}", one.delta.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    println!("pgd  |δ|∞ = {linf:.4} (ε = {eps})");
    println!("pgd loss per step: {:?}", many.loss_trace.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    println!("clean logits row 0: {:?}", model.logits(x, y)?.row(0));
    println!("{:?}", evaluate(&model, &data.test, &cfg)?);
    Ok(())
}
