//! Reverse-mode gradients on a tape, checked against finite differences.

use robust_slu::diffcore::{grad_check, Tape, Tensor};

fn main() -> robust_slu::Result<()> {
    let mut tape = Tape::new();
    let u = tape.param(Tensor::vector(vec![1.0, 2.0, -0.5]));
    let v = tape.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let s = tape.cosine_sim(u, v)?;
    tape.backward(s)?;
    println!("cos(u, v)  = {:.6}", tape.value(s).item());
    println!("d/du       = {:?}", tape.grad(u).unwrap());
    println!("d/dv       = {:?}", tape.grad(v).unwrap());

    // softmax cross-entropy over a small logit matrix
    let logits = Tensor::from_rows(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.3, -0.2]])?;
    let err = grad_check(|t, x| t.cross_entropy_rows(x[0], &[2, 0]), &[logits], 1e-5);
    println!("cross-entropy gradient check: max rel err {err:.2e}");
    Ok(())
}
