//! Pre-train, fine-tune with the full objective and report accuracy per
//! WER bucket on noisy test transcripts.

use robust_slu::corpus::{generate_toy, ToyConfig, WerBuckets};
use robust_slu::pipeline::run;
use robust_slu::trainer::TrainingConfig;

fn main() -> robust_slu::Result<()> {
    let train = generate_toy(&ToyConfig { n_examples: 4000, seed: 1, ..ToyConfig::default() })?;
    let test = generate_toy(&ToyConfig { n_examples: 500, seed: 2, id_prefix: "test".into(), ..ToyConfig::default() })?;
    let cfg = TrainingConfig {
        pretrain_steps: 150,
        finetune_epochs: 10,
        patience: 6,
        ..TrainingConfig::default()
    };
    let out = run("full", &train, &test, &cfg, true, &WerBuckets::google())?;
    for e in &out.finetune_log {
        println!(
            "epoch {}  l_ce {:.3}  l_d {:.3}  l_hard {:.3}  l_soft {:.3}  L_ft {:.3}  val {:.3}",
            e.epoch,
            e.l_ce,
            e.l_d,
            e.l_hard,
            e.l_soft,
            e.l_ft,
            e.val_metric.unwrap_or(f64::NAN)
        );
    }
    print!("{}", out.report.to_table());
    Ok(())
}
