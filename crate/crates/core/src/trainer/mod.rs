//! Contrastive pre-training and fine-tuning with supervised contrastive
//! losses and self-distillation.

mod cache;
mod config;
mod finetune;
mod optim;
mod pretrain;

pub use cache::{init_cache, snapshot_predictions, PredictionCache};
pub use config::{parse_override, FinetuneData, MlmSide, PairingMode, TrainingConfig};
pub use finetune::{finetune, finetune_objective, split_validation, EpochRecord, FinetuneBatch, FinetuneLosses, FinetuneOutcome};
pub use optim::Adam;
pub use pretrain::{make_pretrain_batch, pretrain, pretrain_objective, PretrainBatch, PretrainLosses, PretrainOutcome, PretrainRecord};

use crate::diffcore::Tape;
use crate::encoder::Bound;

/// Gradients of every bound parameter; `None` where the loss did not reach it.
pub fn collect_grads(tape: &Tape, b: &Bound) -> Vec<Option<Vec<f64>>> {
    b.vars.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::TrainingConfig;
    use crate::corpus::{generate_toy, LabelSpace, PairedExample, ToyConfig};
    use crate::encoder::Encoder;
    use crate::pipeline::{build_vocab, init_model};
    use crate::textproc::Vocab;

    pub fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 16,
            pretrain_batch: 16,
            finetune_batch: 16,
            lr: 3e-3,
            ..TrainingConfig::default()
        }
    }

    pub fn toy(n: usize, seed: u64) -> Vec<PairedExample> {
        generate_toy(&ToyConfig {
            n_examples: n,
            seed,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    pub fn setup(n: usize, cfg: &TrainingConfig) -> (Vec<PairedExample>, Vocab, LabelSpace, Encoder) {
        let data = toy(n, 7);
        let vocab = build_vocab(&data, 1).unwrap();
        let space = LabelSpace::from_examples(&data).unwrap();
        let model = init_model(&vocab, cfg).unwrap();
        (data, vocab, space, model)
    }
}
