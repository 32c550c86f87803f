//! Every training loss on a small random batch, and how they compose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_slu::diffcore::{Tape, Tensor};
use robust_slu::losses::{l_c, l_d, l_ft, l_hard, l_mlm, l_pt, l_soft, ContrastiveBatch, LossWeights};

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn main() -> robust_slu::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = LossWeights::default();
    let mut t = Tape::new();

    let clean = t.param(random(&mut rng, 4, 8));
    // ASR-side representations are the clean ones plus a little noise
    let noise = t.constant(random(&mut rng, 4, 8));
    let noise = t.scale(noise, 0.3);
    let asr = t.add(clean, noise)?;
    let lc = l_c(&mut t, &ContrastiveBatch { clean, asr }, w.tau_c)?;
    let mlm_logits = t.param(random(&mut rng, 5, 20));
    let lm = l_mlm(&mut t, mlm_logits, &[3, 7, 7, 12, 19])?;
    let pt = l_pt(&mut t, lc, lm, w.lambda_mlm)?;
    println!("pre-training: l_c {:.4}  l_mlm {:.4}  L_pt {:.4}", t.value(lc).item(), t.value(lm).item(), t.value(pt).item());

    let logits = t.param(random(&mut rng, 4, 3));
    let labels = [0, 0, 2, 1];
    let ce = t.cross_entropy_rows(logits, &labels)?;
    // previous-epoch predictions: one-hot labels, as at the first epoch
    let mut prev = Tensor::zeros(&[4, 3]);
    for (i, &y) in labels.iter().enumerate() {
        prev.data_mut()[i * 3 + y] = 1.0;
    }
    let d = l_d(&mut t, logits, &prev, w.tau_d)?;
    let hard = l_hard(&mut t, clean, &labels, w.tau_sc)?;
    let soft = l_soft(&mut t, clean, &prev, w.tau_sc)?;
    let total = l_ft(&mut t, ce, d, hard, soft, &w)?;
    println!(
        "fine-tuning:  l_ce {:.4}  l_d {:.4}  l_hard {:.4}  l_soft {:.4}  L_ft {:.4}",
        t.value(ce).item(),
        t.value(d).item(),
        t.value(hard).item(),
        t.value(soft).item(),
        t.value(total).item()
    );
    Ok(())
}
