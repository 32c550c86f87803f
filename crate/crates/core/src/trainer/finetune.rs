use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::{init_cache, snapshot_predictions};
use super::collect_grads;
use super::config::{FinetuneData, TrainingConfig};
use super::optim::Adam;
use crate::corpus::{LabelSpace, PairedExample};
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{Bound, Encoder};
use crate::error::{Error, Result};
use crate::eval::{predict, Scores};
use crate::losses::{l_ce_multihead, l_ft, LabeledBatch};
use crate::textproc::{encode, TokenSeq, Vocab};

/// One fine-tuning mini-batch.
#[derive(Clone, Debug)]
pub struct FinetuneBatch {
    pub seqs: Vec<TokenSeq>,
    /// `labels[h][i]`: class of item `i` for head `h`.
    pub labels: Vec<Vec<usize>>,
    /// Joint label key per item.
    pub keys: Vec<usize>,
    /// Previous-epoch distributions, one `[N, C_h]` matrix per head.
    pub prev: Vec<Tensor>,
}

/// Loss nodes of one fine-tuning step; disabled terms are never built.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneLosses {
    pub ce: Var,
    pub d: Option<Var>,
    pub hard: Option<Var>,
    pub soft: Option<Var>,
    pub total: Var,
}

/// Per-epoch means of each loss component plus the validation metric.
/// `*_evals` count how many batches actually computed that term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_ce: f64,
    pub l_d: f64,
    pub l_hard: f64,
    pub l_soft: f64,
    pub l_ft: f64,
    pub d_evals: usize,
    pub hard_evals: usize,
    pub soft_evals: usize,
    pub cache_epoch: usize,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Encoder,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 if none improved on validation).
    pub best_epoch: usize,
}

/// `L_ce + λ_d·L_d + λ_sc·(L_hard + λ_d·L_soft)` with switched-off terms left out.
pub fn finetune_objective(
    model: &Encoder,
    tape: &mut Tape,
    b: &Bound,
    batch: &FinetuneBatch,
    cfg: &TrainingConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<FinetuneLosses> {
    let reps = model.encode_batch(tape, b, &batch.seqs, rng)?;
    let logits = model.classify(tape, b, reps)?;
    let ce = l_ce_multihead(tape, &logits, &batch.labels)?;
    let labeled = LabeledBatch {
        reps,
        labels: batch.keys.clone(),
        prev_probs: batch.prev.clone(),
    };
    let d = if cfg.use_d {
        Some(labeled.distill(tape, &logits, cfg.tau_d)?)
    } else {
        None
    };
    let hard = if cfg.use_hard {
        Some(labeled.hard(tape, cfg.tau_sc)?)
    } else {
        None
    };
    let soft = if cfg.use_soft {
        Some(labeled.soft(tape, cfg.tau_sc)?)
    } else {
        None
    };
    let total = if d.is_none() && hard.is_none() && soft.is_none() {
        ce
    } else {
        let mut zero = || tape.constant(Tensor::scalar(0.0));
        let (dz, hz, sz) = (d.unwrap_or_else(&mut zero), hard.unwrap_or_else(&mut zero), soft.unwrap_or_else(&mut zero));
        l_ft(tape, ce, dz, hz, sz, &cfg.loss_weights())?
    };
    Ok(FinetuneLosses { ce, d, hard, soft, total })
}

struct Items {
    ids: Vec<String>,
    seqs: Vec<TokenSeq>,
    labels: Vec<Vec<usize>>,
    keys: Vec<usize>,
}

fn build_items(examples: &[&PairedExample], space: &LabelSpace, vocab: &Vocab, cfg: &TrainingConfig) -> Result<Items> {
    let mut items = Items {
        ids: Vec::new(),
        seqs: Vec::new(),
        labels: Vec::new(),
        keys: Vec::new(),
    };
    for ex in examples {
        let labels = space.indices(&ex.label)?;
        let key = space.joint_key(&labels);
        let texts: Vec<(&str, &str)> = match cfg.finetune_data {
            FinetuneData::Asr => vec![("", &ex.asr)],
            FinetuneData::Manual => vec![("", &ex.clean)],
            FinetuneData::ManualPlusAsr => vec![("#clean", &ex.clean), ("#asr", &ex.asr)],
        };
        for (suffix, text) in texts {
            items.ids.push(format!("{}{suffix}", ex.id));
            items.seqs.push(encode(text, vocab, cfg.max_len));
            items.labels.push(labels.clone());
            items.keys.push(key);
        }
    }
    Ok(items)
}

/// Consecutive chunks of `order`; a trailing single item joins the previous chunk.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// Splits off `val_frac` of the examples for early stopping; returns
/// `(train, validation)` preserving file order within each part.
pub fn split_validation<'a>(
    examples: &'a [PairedExample],
    val_frac: f64,
    seed: u64,
) -> (Vec<&'a PairedExample>, Vec<&'a PairedExample>) {
    let n_val = ((examples.len() as f64) * val_frac).round() as usize;
    let n_val = n_val.min(examples.len().saturating_sub(2));
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; examples.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = examples.iter().zip(&is_val).partition(|(_, v)| **v);
    (train.into_iter().map(|p| p.0).collect(), val.into_iter().map(|p| p.0).collect())
}

/// Trains the classification heads and encoder on labelled examples. The
/// previous-epoch prediction cache starts as one-hot labels and is replaced
/// only after each epoch ends. Returns the parameters with the best
/// validation metric (joint accuracy with several heads, accuracy otherwise).
pub fn finetune(
    mut model: Encoder,
    vocab: &Vocab,
    space: &LabelSpace,
    examples: &[PairedExample],
    cfg: &TrainingConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if model.head_sizes() != space.head_sizes().as_slice() {
        return Err(Error::Config(format!(
            "model heads {:?} do not match label space {:?}",
            model.head_sizes(),
            space.head_sizes()
        )));
    }
    let (train, val) = split_validation(examples, cfg.val_frac, cfg.seed);
    let items = build_items(&train, space, vocab, cfg)?;
    if items.seqs.len() < 2 {
        return Err(Error::EmptyBatch(format!("fine-tuning needs at least 2 items, got {}", items.seqs.len())));
    }
    let val_gold: Vec<Vec<usize>> = val.iter().map(|e| space.indices(&e.label)).collect::<Result<_>>()?;
    let val_texts: Vec<&str> = val.iter().map(|e| e.asr.as_str()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch_size = cfg.finetune_batch;
    let per_epoch = batches(&(0..items.seqs.len()).collect::<Vec<_>>(), batch_size).len();
    let warmup = (cfg.warmup_frac * (cfg.finetune_epochs * per_epoch) as f64).ceil() as usize;
    let mut opt = Adam::new(model.params(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, warmup, cfg.grad_clip);
    let needs_cache = cfg.use_d || cfg.use_soft;
    let mut cache = init_cache(&items.ids, &items.labels, model.head_sizes())?;

    let mut history = Vec::with_capacity(cfg.finetune_epochs);
    let mut best: Option<(f64, usize, Encoder)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..items.seqs.len()).collect();
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            steps: 0,
            l_ce: 0.0,
            l_d: 0.0,
            l_hard: 0.0,
            l_soft: 0.0,
            l_ft: 0.0,
            d_evals: 0,
            hard_evals: 0,
            soft_evals: 0,
            cache_epoch: cache.epoch,
            val_metric: None,
        };
        for chunk in batches(&order, batch_size) {
            let batch = FinetuneBatch {
                seqs: chunk.iter().map(|&i| items.seqs[i].clone()).collect(),
                labels: (0..model.head_sizes().len())
                    .map(|h| chunk.iter().map(|&i| items.labels[i][h]).collect())
                    .collect(),
                keys: chunk.iter().map(|&i| items.keys[i]).collect(),
                prev: if needs_cache { cache.rows(&chunk)? } else { Vec::new() },
            };
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let losses = finetune_objective(&model, &mut tape, &b, &batch, cfg, Some(&mut rng))?;
            tape.backward(losses.total)?;
            let value = |v: Var| tape.value(v).item();
            rec.steps += 1;
            rec.l_ce += value(losses.ce);
            rec.l_ft += value(losses.total);
            if let Some(v) = losses.d {
                rec.l_d += value(v);
                rec.d_evals += 1;
            }
            if let Some(v) = losses.hard {
                rec.l_hard += value(v);
                rec.hard_evals += 1;
            }
            if let Some(v) = losses.soft {
                rec.l_soft += value(v);
                rec.soft_evals += 1;
            }
            let grads = collect_grads(&tape, &b);
            drop(tape);
            opt.step(model.params_mut(), &grads)?;
        }
        let steps = rec.steps as f64;
        for v in [&mut rec.l_ce, &mut rec.l_d, &mut rec.l_hard, &mut rec.l_soft, &mut rec.l_ft] {
            *v /= steps;
        }
        if needs_cache {
            cache = snapshot_predictions(&model, &items.ids, &items.seqs, cfg.tau_d, epoch)?;
            cache.check()?;
        }
        let mut stop = false;
        if !val.is_empty() {
            let pred = predict(&model, vocab, &val_texts)?;
            let metric = Scores::compute(&pred, &val_gold)?.primary();
            rec.val_metric = Some(metric);
            if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
                best = Some((metric, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                stop = since_best >= cfg.patience;
            }
        }
        history.push(rec);
        if stop {
            break;
        }
    }
    let (model, best_epoch) = match best {
        Some((_, epoch, m)) => (m, epoch),
        None => {
            let last = history.last().map_or(0, |r| r.epoch);
            (model, last)
        }
    };
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]]);
        assert_eq!(batches(&order[..1], 4), vec![vec![0]]);
        assert_eq!(batches(&order[..6], 4).len(), 2);
    }

    #[test]
    fn validation_split_is_disjoint_and_sized() {
        let ex: Vec<PairedExample> = (0..50)
            .map(|i| PairedExample::new(i.to_string(), "a b", "a b", crate::corpus::Label::Intent("x".into())).unwrap())
            .collect();
        let (train, val) = split_validation(&ex, 0.1, 3);
        assert_eq!(val.len(), 5);
        assert_eq!(train.len(), 45);
        let mut ids: Vec<&str> = train.iter().chain(&val).map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 50);
        assert_eq!(split_validation(&ex, 0.1, 3).1, val);
    }
}


#[cfg(test)]
mod loop_tests {
    use super::*;
    use crate::trainer::fixtures::{setup, tiny_config};

    #[test]
    fn cross_entropy_halves_over_ten_epochs() {
        let cfg = TrainingConfig {
            finetune_epochs: 10,
            val_frac: 0.0,
            ..tiny_config()
        }
        .ce_only();
        let (data, vocab, space, model) = setup(500, &cfg);
        let model = model.with_heads(&space.head_sizes()).unwrap();
        let out = finetune(model, &vocab, &space, &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 10);
        let first = out.history[0].l_ce;
        let last = out.history[9].l_ce;
        assert!(last < 0.5 * first, "first {first} last {last}");
    }

    #[test]
    fn early_stopping_returns_the_best_epoch() {
        let cfg = TrainingConfig {
            finetune_epochs: 6,
            patience: 2,
            val_frac: 0.2,
            ..tiny_config()
        };
        let (data, vocab, space, model) = setup(200, &cfg);
        let model = model.with_heads(&space.head_sizes()).unwrap();
        let out = finetune(model, &vocab, &space, &data, &cfg).unwrap();
        let metrics: Vec<f64> = out.history.iter().map(|r| r.val_metric.unwrap()).collect();
        let best = metrics.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first_best = metrics.iter().position(|m| *m == best).unwrap() + 1;
        assert_eq!(out.best_epoch, first_best);

        let (_, val) = split_validation(&data, cfg.val_frac, cfg.seed);
        let texts: Vec<&str> = val.iter().map(|e| e.asr.as_str()).collect();
        let gold: Vec<Vec<usize>> = val.iter().map(|e| space.indices(&e.label).unwrap()).collect();
        let pred = predict(&out.model, &vocab, &texts).unwrap();
        assert_eq!(Scores::compute(&pred, &gold).unwrap().primary(), best);
    }

    #[test]
    fn cache_lags_one_epoch_and_runs_repeat() {
        let cfg = TrainingConfig {
            finetune_epochs: 3,
            val_frac: 0.0,
            ..tiny_config()
        };
        let (data, vocab, space, model) = setup(60, &cfg);
        let model = model.with_heads(&space.head_sizes()).unwrap();
        let a = finetune(model.clone(), &vocab, &space, &data, &cfg).unwrap();
        for r in &a.history {
            assert_eq!(r.cache_epoch, r.epoch - 1);
            assert_eq!(r.d_evals, r.steps);
            assert_eq!(r.soft_evals, r.steps);
        }
        let b = finetune(model, &vocab, &space, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn disabled_terms_are_never_evaluated() {
        let cfg = TrainingConfig {
            finetune_epochs: 2,
            use_d: false,
            use_soft: false,
            ..tiny_config()
        };
        let (data, vocab, space, model) = setup(60, &cfg);
        let model = model.with_heads(&space.head_sizes()).unwrap();
        let out = finetune(model, &vocab, &space, &data, &cfg).unwrap();
        for r in &out.history {
            assert_eq!((r.d_evals, r.soft_evals, r.l_d, r.l_soft), (0, 0, 0.0, 0.0));
            assert_eq!(r.hard_evals, r.steps);
        }
    }

    #[test]
    fn manual_plus_asr_doubles_items() {
        let cfg = TrainingConfig {
            finetune_epochs: 1,
            val_frac: 0.0,
            finetune_batch: 10,
            finetune_data: FinetuneData::ManualPlusAsr,
            ..tiny_config()
        };
        let (data, vocab, space, model) = setup(40, &cfg);
        let model = model.with_heads(&space.head_sizes()).unwrap();
        let out = finetune(model, &vocab, &space, &data, &cfg).unwrap();
        assert_eq!(out.history[0].steps, 8);
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let cfg = tiny_config();
        let (data, vocab, space, model) = setup(20, &cfg);
        let model = model.with_heads(&[3]).unwrap();
        assert!(matches!(finetune(model, &vocab, &space, &data, &cfg), Err(Error::Config(_))));
    }
}
