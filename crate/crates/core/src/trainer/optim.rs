use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Adam with a linear warmup from zero over the first `warmup` steps.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup: usize,
    grad_clip: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, betas: (f64, f64), eps: f64, warmup: usize, grad_clip: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            warmup,
            grad_clip,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// Applies one update. `grads[i]` of `None` means a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let norm: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Invariant("non-finite gradient".into()));
        }
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_deref();
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(Error::Shape(format!("gradient {i} has {} entries for {}", g.len(), p.numel())));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] * clip);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut opt = Adam::new(&p, 0.1, (0.9, 0.999), 1e-12, 0, 0.0);
        opt.step(&mut p, &[Some(vec![3.0, -0.5, 0.0])]).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-9);
        assert!((d[1] + 1.9).abs() < 1e-9);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn warmup_is_linear() {
        let p = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(&p, 1.0, (0.9, 0.999), 1e-8, 4, 0.0);
        let mut lrs = Vec::new();
        let mut q = p.clone();
        for _ in 0..6 {
            lrs.push(opt.current_lr());
            opt.step(&mut q, &[None]).unwrap();
        }
        assert_eq!(lrs, [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -4.0])];
        let mut opt = Adam::new(&p, 0.05, (0.9, 0.999), 1e-8, 10, 1.0);
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &[Some(g)]).unwrap();
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(&p, 0.1, (0.9, 0.999), 1e-8, 0, 0.0);
        assert!(opt.step(&mut p, &[Some(vec![f64::NAN])]).is_err());
    }
}
