//! Build a small loss on the tape, backprop, and compare against central
//! finite differences.

use adlab::autodiff::Tape;
use adlab::gradcheck::check;
use adlab::Tensor;

fn main() -> adlab::Result<()> {
    let x = Tensor::matrix(3, 2, vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.7])?;
    let w = Tensor::matrix(4, 2, vec![0.5, -0.2, 0.1, 0.8, -0.6, 0.3, 0.4, 0.4])?;
    let b = Tensor::matrix(1, 4, vec![0.0, 0.1, -0.1, 0.2])?;
    let target = Tensor::one_hot(&[0, 3, 1], 4)?;

    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
    let z = tape.linear(xv, wv, bv)?;
    let t = tape.constant(target.clone());
    let per_row = tape.cross_entropy(t, z)?;
    let loss = tape.mean(per_row);
    tape.backward(loss)?;
    println!("loss      = {:.6}", tape.value(loss).data()[0]);
    println!("dL/dW     = {:?}", tape.grad(wv).unwrap().data());

    let report = check(&[x, w, b], 1e-6, |tape, v| {
        let h = tape.linear(v[0], v[1], v[2])?;
        let h = tape.relu(h);
        let t = tape.constant(target.clone());
        let per_row = tape.cross_entropy(t, h)?;
        Ok(tape.mean(per_row))
    })?;
    println!("max rel err vs finite differences = {:.2e}", report.max_rel_err);
    Ok(())
}
