use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{MlmSide, PairingMode, TrainingConfig};
use super::optim::Adam;
use super::collect_grads;
use crate::corpus::PairedExample;
use crate::diffcore::{Tape, Var};
use crate::encoder::{Bound, Encoder};
use crate::error::{Error, Result};
use crate::losses::{l_c, l_mlm, l_pt, ContrastiveBatch};
use crate::textproc::{apply_mlm_mask, encode, MaskedSeq, TokenSeq, Vocab};

/// One pre-training mini-batch, already tokenized and masked.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    /// Positive partners: clean transcripts, or the ASR sentences again in
    /// dropout pairing mode.
    pub anchors: Vec<TokenSeq>,
    pub asr: Vec<TokenSeq>,
    pub masked: Vec<MaskedSeq>,
}

/// Loss nodes of one pre-training step; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLosses {
    pub l_c: Option<Var>,
    pub l_mlm: Option<Var>,
    pub l_pt: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub l_c: f64,
    pub l_mlm: f64,
    pub l_pt: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Encoder,
    pub log: Vec<PretrainRecord>,
}

/// Tokenizes both sides of `pairs[idx]` and masks the configured side(s).
pub fn make_pretrain_batch<R: Rng + ?Sized>(
    pairs: &[PairedExample],
    idx: &[usize],
    vocab: &Vocab,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<PretrainBatch> {
    let enc = |t: &str| encode(t, vocab, cfg.max_len);
    let clean: Vec<TokenSeq> = idx.iter().map(|&i| enc(&pairs[i].clean)).collect();
    let asr: Vec<TokenSeq> = idx.iter().map(|&i| enc(&pairs[i].asr)).collect();
    let mut masked = Vec::new();
    if cfg.use_mlm {
        let sides: Vec<&[TokenSeq]> = match cfg.mlm_side {
            MlmSide::Clean => vec![&clean],
            MlmSide::Asr => vec![&asr],
            MlmSide::Both => vec![&clean, &asr],
        };
        for side in sides {
            for s in side {
                masked.push(apply_mlm_mask(s, cfg.mask_ratio, vocab.len(), rng)?);
            }
        }
    }
    let anchors = match cfg.pairing_mode {
        PairingMode::CleanAsr => clean,
        PairingMode::SimcseDropout => asr.clone(),
    };
    Ok(PretrainBatch { anchors, asr, masked })
}

/// `L_c + λ_mlm·L_mlm` for one batch, all sequences in a single packed pass.
pub fn pretrain_objective(
    model: &Encoder,
    tape: &mut Tape,
    b: &Bound,
    batch: &PretrainBatch,
    cfg: &TrainingConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<PretrainLosses> {
    let n = batch.asr.len();
    let mut seqs: Vec<TokenSeq> = Vec::with_capacity(2 * n + batch.masked.len());
    if cfg.use_c {
        seqs.extend(batch.anchors.iter().cloned());
        seqs.extend(batch.asr.iter().cloned());
    }
    let offset = seqs.len();
    seqs.extend(batch.masked.iter().map(|m| m.seq.clone()));
    if seqs.is_empty() {
        return Err(Error::EmptyBatch("nothing to pre-train on".into()));
    }
    let hidden = model.forward(tape, b, &seqs, rng)?;

    let lc = if cfg.use_c {
        let reps = model.cls(tape, &hidden)?;
        let clean = tape.gather_rows(reps, &(0..n).collect::<Vec<_>>())?;
        let asr = tape.gather_rows(reps, &(n..2 * n).collect::<Vec<_>>())?;
        Some(l_c(tape, &ContrastiveBatch { clean, asr }, cfg.tau_c)?)
    } else {
        None
    };
    let lm = if cfg.use_mlm {
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for (k, m) in batch.masked.iter().enumerate() {
            positions.extend(m.positions.iter().map(|&p| (offset + k, p)));
            targets.extend_from_slice(&m.targets);
        }
        let logits = model.mlm_logits(tape, b, &hidden, &positions)?;
        Some(l_mlm(tape, logits, &targets)?)
    } else {
        None
    };
    let total = match (lc, lm) {
        (Some(c), Some(m)) => l_pt(tape, c, m, cfg.lambda_mlm)?,
        (Some(c), None) => c,
        (None, Some(m)) => tape.scale(m, cfg.lambda_mlm),
        (None, None) => return Err(Error::Config("both pre-training losses are disabled".into())),
    };
    Ok(PretrainLosses {
        l_c: lc,
        l_mlm: lm,
        l_pt: total,
    })
}

/// Runs `cfg.pretrain_steps` optimizer steps over randomly drawn batches.
pub fn pretrain(
    mut model: Encoder,
    vocab: &Vocab,
    pairs: &[PairedExample],
    cfg: &TrainingConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match {} tokens",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    if pairs.len() < 2 {
        return Err(Error::EmptyBatch(format!("pre-training needs at least 2 pairs, got {}", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.pretrain_batch.min(pairs.len());
    let warmup = (cfg.warmup_frac * cfg.pretrain_steps as f64).ceil() as usize;
    let mut opt = Adam::new(model.params(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, warmup, cfg.grad_clip);
    let mut log = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), batch_size).into_vec();
        let batch = make_pretrain_batch(pairs, &idx, vocab, cfg, &mut rng)?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let losses = pretrain_objective(&model, &mut tape, &b, &batch, cfg, Some(&mut rng))?;
        tape.backward(losses.l_pt)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let record = PretrainRecord {
            step,
            l_c: value(losses.l_c),
            l_mlm: value(losses.l_mlm),
            l_pt: tape.value(losses.l_pt).item(),
            lr: opt.current_lr(),
        };
        let grads = collect_grads(&tape, &b);
        drop(tape);
        opt.step(model.params_mut(), &grads)?;
        log.push(record);
    }
    Ok(PretrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::fixtures::{setup, tiny_config};

    fn mean(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainingConfig {
            pretrain_steps: 0,
            ..tiny_config()
        };
        let (data, vocab, _, model) = setup(20, &cfg);
        let out = pretrain(model.clone(), &vocab, &data, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model.params(), model.params());
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let cfg = TrainingConfig {
            pretrain_steps: 50,
            ..tiny_config()
        };
        let (data, vocab, _, model) = setup(60, &cfg);
        let a = pretrain(model.clone(), &vocab, &data, &cfg).unwrap();
        let b = pretrain(model, &vocab, &data, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn contrastive_loss_falls() {
        let cfg = TrainingConfig {
            pretrain_steps: 500,
            ..tiny_config()
        };
        let (data, vocab, _, model) = setup(200, &cfg);
        let out = pretrain(model, &vocab, &data, &cfg).unwrap();
        let first = mean(out.log[..50].iter().map(|r| r.l_c));
        let last = mean(out.log[450..].iter().map(|r| r.l_c));
        assert!(last < first, "first {first} last {last}");
    }

    #[test]
    fn switched_off_terms_log_zero() {
        let cfg = TrainingConfig {
            pretrain_steps: 3,
            use_mlm: false,
            ..tiny_config()
        };
        let (data, vocab, _, model) = setup(40, &cfg);
        let out = pretrain(model.clone(), &vocab, &data, &cfg).unwrap();
        assert!(out.log.iter().all(|r| r.l_mlm == 0.0 && r.l_c > 0.0 && r.l_c == r.l_pt));
        let cfg = TrainingConfig {
            use_mlm: true,
            use_c: false,
            ..cfg
        };
        let out = pretrain(model, &vocab, &data, &cfg).unwrap();
        assert!(out.log.iter().all(|r| r.l_c == 0.0 && r.l_mlm > 0.0));
    }

    #[test]
    fn batch_composition_follows_modes() {
        use rand::SeedableRng;
        let cfg = tiny_config();
        let (data, vocab, _, _) = setup(10, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = [0, 3, 5];
        let b = make_pretrain_batch(&data, &idx, &vocab, &cfg, &mut rng).unwrap();
        assert_eq!(b.masked.len(), 6);
        assert_eq!(b.anchors[1], encode(&data[3].clean, &vocab, cfg.max_len));
        let simcse = TrainingConfig {
            pairing_mode: PairingMode::SimcseDropout,
            mlm_side: MlmSide::Asr,
            ..cfg.clone()
        };
        let b = make_pretrain_batch(&data, &idx, &vocab, &simcse, &mut rng).unwrap();
        assert_eq!(b.anchors, b.asr);
        assert_eq!(b.masked.len(), 3);
        let no_mlm = TrainingConfig {
            use_mlm: false,
            ..cfg
        };
        assert!(make_pretrain_batch(&data, &idx, &vocab, &no_mlm, &mut rng).unwrap().masked.is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config();
        let (data, vocab, _, model) = setup(10, &cfg);
        let small = TrainingConfig {
            pretrain_batch: 1,
            ..cfg.clone()
        };
        assert!(matches!(pretrain(model.clone(), &vocab, &data, &small), Err(Error::Config(_))));
        assert!(pretrain(model.clone(), &vocab, &data[..1], &cfg).is_err());
        let other = crate::textproc::Vocab::build(["x y"], 1).unwrap();
        assert!(matches!(pretrain(model, &other, &data, &cfg), Err(Error::Config(_))));
    }
}
