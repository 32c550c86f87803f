//! Contrastive + MLM pre-training on toy clean/ASR pairs.

use robust_slu::corpus::{generate_toy, ToyConfig};
use robust_slu::pipeline::{build_vocab, init_model};
use robust_slu::trainer::{pretrain, TrainingConfig};

fn main() -> robust_slu::Result<()> {
    let pairs = generate_toy(&ToyConfig { n_examples: 1000, ..ToyConfig::default() })?;
    let cfg = TrainingConfig { pretrain_steps: 150, ..TrainingConfig::default() };
    let vocab = build_vocab(&pairs, cfg.min_freq)?;
    let model = init_model(&vocab, &cfg)?;
    let out = pretrain(model, &vocab, &pairs, &cfg)?;
    for r in out.log.iter().filter(|r| r.step % 25 == 0 || r.step + 1 == cfg.pretrain_steps) {
        println!("step {:>4}  l_c {:.3}  l_mlm {:.3}  L_pt {:.3}  lr {:.2e}", r.step, r.l_c, r.l_mlm, r.l_pt, r.lr);
    }
    Ok(())
}
