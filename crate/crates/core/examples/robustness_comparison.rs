//! MLM-only vs contrastive pre-training, and cross-entropy vs full
//! fine-tuning, compared per WER bucket. Fine-tunes on clean transcripts
//! with 20% label noise and tests on recognizer output.
//!
//! Usage: `robustness_comparison [seeds] [pretrain_steps] [finetune_epochs]`.

use robust_slu::corpus::{generate_toy, ToyConfig, WerBuckets};
use robust_slu::eval::EvalReport;
use robust_slu::pipeline::compare;
use robust_slu::trainer::{FinetuneData, TrainingConfig};

fn row(label: &str, r: &EvalReport) {
    let cells: Vec<String> = r
        .bucket_metrics()
        .iter()
        .map(|m| m.map_or("     -".into(), |v| format!("{:6.2}", 100.0 * v)))
        .collect();
    println!("  {label:<18} {} | {:6.2}", cells.join(" "), 100.0 * r.overall.primary());
}

fn main() -> robust_slu::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let seeds = args.first().copied().unwrap_or(1) as u64;
    let steps = args.get(1).copied().unwrap_or(1000);
    let epochs = args.get(2).copied().unwrap_or(10);
    let buckets = WerBuckets::google();
    println!("  {:<18} {} |    all", "", buckets.names().iter().map(|n| format!("{n:>6}")).collect::<Vec<_>>().join(" "));
    for seed in 1..=seeds {
        let train = generate_toy(&ToyConfig { n_examples: 5000, label_noise: 0.2, seed: seed * 100 + 1, ..ToyConfig::default() })?;
        let test = generate_toy(&ToyConfig { n_examples: 5000, seed: seed * 100 + 2, id_prefix: "test".into(), ..ToyConfig::default() })?;
        let cfg = TrainingConfig {
            seed,
            pretrain_steps: steps,
            finetune_epochs: epochs,
            patience: 4,
            finetune_data: FinetuneData::Manual,
            ..TrainingConfig::default()
        };
        let c = compare(&train, &test, &cfg, &buckets)?;
        println!("seed {seed}");
        row("mlm + ce", &c.mlm_ce);
        row("contrastive + ce", &c.contrastive_ce);
        row("contrastive + full", &c.contrastive_full);
    }
    Ok(())
}
