//! Differentiable tensor operations with reverse-mode gradients.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{check_temperature, softmax_in_place};

/// Softmax of plain values at the given temperature (no tape).
pub fn softmax_values(z: &[f64], temperature: f64) -> crate::Result<Vec<f64>> {
    check_temperature(temperature)?;
    let mut out: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn cos(u: &[f64], v: &[f64]) -> Result<f64, Error> {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(u.to_vec()));
        let b = t.constant(Tensor::vector(v.to_vec()));
        let s = t.cosine_sim(a, b)?;
        Ok(t.value(s).item())
    }

    #[test]
    fn cosine_spot_values() {
        assert!(close(cos(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap(), 1.0, 1e-15));
        assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(
            cos(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-15
        ));
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        assert!(matches!(cos(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn softmax_spot_values() {
        let p = softmax_values(&[4.0, 4.0, 4.0], 0.3).unwrap();
        assert!(p.iter().all(|v| close(*v, 1.0 / 3.0, 1e-15)));
        let p = softmax_values(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
        assert!(matches!(softmax_values(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax_values(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_on_tape_rejects_bad_temperature() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.softmax(z, 0.0).is_err());
        let p = t.softmax(z, 1e3).unwrap();
        assert!(close(t.value(p).data().iter().sum(), 1.0, 1e-12));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_values(&[1e300, 0.0, -1e300], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_spot_values() {
        let mut t = Tape::new();
        let z = t.param(Tensor::vector(vec![0.0, 0.0]));
        let l = t.cross_entropy(z, 0).unwrap();
        assert!(close(t.value(l).item(), 2f64.ln(), 1e-15));

        let z2 = t.constant(Tensor::vector(vec![30.0, 0.0, 0.0]));
        let l2 = t.cross_entropy(z2, 0).unwrap();
        assert!(t.value(l2).item() < 1e-9);

        assert!(matches!(t.cross_entropy(z, 2), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_matches_recomputed_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..4);
            // independent recomputation
            let denom: f64 = logits.iter().map(|v| v.exp()).sum();
            let expected = -(logits[label].exp() / denom).ln();
            let mut t = Tape::new();
            let z = t.param(Tensor::vector(logits.clone()));
            let l = t.cross_entropy(z, label).unwrap();
            assert!(close(t.value(l).item(), expected, 1e-12));
            t.backward(l).unwrap();
            for (j, g) in t.grad(z).unwrap().iter().enumerate() {
                let p = logits[j].exp() / denom;
                let onehot = if j == label { 1.0 } else { 0.0 };
                assert!(close(*g, p - onehot, 1e-12));
            }
        }
    }

    #[test]
    fn backward_sum_of_squares_is_two_x() {
        let x = vec![0.5, -1.25, 3.0, 0.0];
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(x.clone()));
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        let g = t.grad(v).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_deterministic_and_resets() {
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(vec![1.0, 2.0]));
        let s = t.sum(v);
        t.backward(s).unwrap();
        let first = t.grad(v).unwrap().to_vec();
        t.backward(s).unwrap();
        assert_eq!(first, t.grad(v).unwrap());
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[6]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_detects_a_missing_gradient() {
        // weights enter as constants, so their analytic gradient is zero
        let err = grad_check(
            |t, v| {
                let w = t.value(v[1]).data().to_vec();
                t.weighted_sum(v[0], w)
            },
            &[Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0, -1.0])],
            1e-5,
        );
        assert!(err > 0.5, "{err}");
    }

    #[test]
    fn grad_check_reports_failures_as_infinite() {
        let err = grad_check(
            |t, v| t.cosine_sim(v[0], v[0]),
            &[Tensor::vector(vec![0.0, 0.0])],
            1e-5,
        );
        assert!(err.is_infinite());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let bt = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let gain = rand_tensor(&mut rng, &[4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let sq = rand_tensor(&mut rng, &[4, 4]);
        let wsq = rand_tensor(&mut rng, &[4, 4]);

        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>, Vec<Tensor>)> = vec![
            (
                "matmul",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let c = t.matmul(v[0], v[1], false)?;
                    { let m = t.mul(c, v[2])?; Ok(t.sum(m)) }
                }),
                vec![a.clone(), b.clone(), w.clone()],
            ),
            (
                "matmul_t",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let c = t.matmul(v[0], v[1], true)?;
                    { let m = t.mul(c, v[2])?; Ok(t.sum(m)) }
                }),
                vec![a.clone(), bt.clone(), w.clone()],
            ),
            (
                "layer_norm+gelu+bias",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    let y = t.gelu(y);
                    let y = t.add_bias(y, v[1])?;
                    let y = t.mul(y, y)?;
                    Ok(t.sum(y))
                }),
                vec![a.clone(), gain.clone(), bias.clone()],
            ),
            (
                "normalize+cos matrix+log_softmax",
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let n = t.normalize_rows(v[0])?;
                    let s = t.matmul(n, n, true)?;
                    let s = t.scale(s, 1.0 / 0.2);
                    let l = t.log_softmax_rows(s, true)?;
                    { let m = t.mul(l, v[1])?; Ok(t.sum(m)) }
                }),
                vec![sq.clone(), wsq.clone()],
            ),
            (
                "softmax+gather+concat",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let p = t.softmax(v[0], 0.7)?;
                    let r = t.gather_rows(p, &[2, 0, 2])?;
                    let c = t.concat_rows(&[r, v[0]])?;
                    let c = t.mul_const(c, (0..24).map(|i| i as f64 * 0.1).collect())?;
                    let c = t.sub(c, c)?;
                    let d = t.add_scalar(c, 1.0);
                    let e = t.mul(d, d)?;
                    let f = t.gather_rows(v[0], &[1])?;
                    let f = t.reshape(f, &[4])?;
                    let ce = t.cross_entropy(f, 3)?;
                    let s = t.sum(e);
                    let s = t.scale(s, 0.5);
                    let s = t.add(s, ce)?;
                    let p2 = t.gather_rows(p, &[1])?;
                    let p2 = t.sum(p2);
                    t.add(s, p2)
                }),
                vec![a.clone()],
            ),
            (
                "attention",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let o = t.attention(v[0], v[1], v[2], &[(0, 3), (3, 2), (5, 1)], 2)?;
                    { let m = t.mul(o, v[3])?; Ok(t.sum(m)) }
                }),
                {
                    let q = rand_tensor(&mut rng, &[6, 4]);
                    let k = rand_tensor(&mut rng, &[6, 4]);
                    let vv = rand_tensor(&mut rng, &[6, 4]);
                    let ww = rand_tensor(&mut rng, &[6, 4]);
                    vec![q, k, vv, ww]
                },
            ),
        ];
        for (name, f, inputs) in cases {
            let err = grad_check(|t, v| f(t, v), &inputs, 1e-5);
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn attention_segments_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[5, 4]);
        let mut t = Tape::new();
        let qv = t.constant(q.clone());
        let joint = t.attention(qv, qv, qv, &[(0, 2), (2, 3)], 2).unwrap();
        let tail = Tensor::new(vec![3, 4], q.data()[8..].to_vec()).unwrap();
        let tv = t.constant(tail);
        let alone = t.attention(tv, tv, tv, &[(0, 3)], 2).unwrap();
        assert_eq!(&t.value(joint).data()[8..], t.value(alone).data());
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(
            z in proptest::collection::vec(-50.0f64..50.0, 1..12),
            tau in 0.05f64..10.0,
        ) {
            let p = softmax_values(&z, tau).unwrap();
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 2..16),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..u.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let base = cos(&u, &v).unwrap();
            let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * beta).collect();
            prop_assert!((cos(&su, &sv).unwrap() - base).abs() <= 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        }

        #[test]
        fn backward_is_linear(
            seed in 0u64..500,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let f = |t: &mut Tape, v: Var| -> crate::Result<Var> {
                let n = t.normalize_rows(v)?;
                let s = t.matmul(n, n, true)?;
                let l = t.log_softmax_rows(s, true)?;
                t.weighted_sum(l, vec![1.0; 9])
            };
            let g = |t: &mut Tape, v: Var| -> crate::Result<Var> {
                let y = t.gelu(v);
                let y = t.mul(y, v)?;
                Ok(t.sum(y))
            };
            let grad_of = |which: u8| -> Vec<f64> {
                let mut t = Tape::new();
                let v = t.param(x.clone());
                let out = match which {
                    0 => f(&mut t, v).unwrap(),
                    1 => g(&mut t, v).unwrap(),
                    _ => {
                        let fv = f(&mut t, v).unwrap();
                        let gv = g(&mut t, v).unwrap();
                        let fa = t.scale(fv, a);
                        let gb = t.scale(gv, b);
                        t.add(fa, gb).unwrap()
                    }
                };
                t.backward(out).unwrap();
                t.grad(v).unwrap().to_vec()
            };
            let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
            for i in 0..gc.len() {
                prop_assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-10);
            }
        }
    }
}
