//! Every named ablation on a small model, averaged over two seeds.

use robust_slu::corpus::{generate_toy, ToyConfig, WerBuckets};
use robust_slu::pipeline::{ablation, run, SeedSummary, ABLATIONS};
use robust_slu::trainer::TrainingConfig;

fn main() -> robust_slu::Result<()> {
    let train = generate_toy(&ToyConfig { n_examples: 600, seed: 1, ..ToyConfig::default() })?;
    let test = generate_toy(&ToyConfig { n_examples: 300, seed: 2, id_prefix: "test".into(), ..ToyConfig::default() })?;
    let base = TrainingConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        pretrain_steps: 40,
        finetune_epochs: 3,
        ..TrainingConfig::default()
    };
    for name in ABLATIONS {
        let cfg = ablation(name, &base)?;
        let reports = [1, 2]
            .iter()
            .map(|&seed| Ok(run(name, &train, &test, &TrainingConfig { seed, ..cfg.clone() }, true, &WerBuckets::google())?.report))
            .collect::<robust_slu::Result<Vec<_>>>()?;
        print!("{}", SeedSummary::from_reports(name, &reports)?.to_table());
    }
    Ok(())
}
