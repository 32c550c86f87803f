use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::Result;

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// Returns the maximum over every input entry of
/// `|analytic - fd| / max(1, |analytic|, |fd|)`. Failures inside `f`
/// (or a non-finite result) are reported as `f64::INFINITY`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    run(&f, inputs, step).unwrap_or(f64::INFINITY)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn run<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[ti].data()[j];
            probe[ti].data_mut()[j] = orig + step;
            let up = eval(f, &probe)?;
            probe[ti].data_mut()[j] = orig - step;
            let down = eval(f, &probe)?;
            probe[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            if !err.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
