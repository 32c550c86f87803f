//! End-to-end runs: build a vocabulary, optionally pre-train, fine-tune and
//! evaluate, plus named ablations and multi-seed aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, PairedExample, WerBuckets};
use crate::encoder::{Checkpoint, Encoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::textproc::Vocab;
use crate::trainer::{finetune, pretrain, EpochRecord, PretrainRecord, TrainingConfig};

/// Named loss configurations: the full objective and one row per removed term.
pub const ABLATIONS: [&str; 6] = ["full", "no_mlm", "no_c", "no_hard_soft", "no_d_soft", "no_soft"];

/// Applies a named ablation to `cfg`.
pub fn ablation(name: &str, cfg: &TrainingConfig) -> Result<TrainingConfig> {
    let mut c = cfg.clone();
    match name {
        "full" => {}
        "no_mlm" => c.use_mlm = false,
        "no_c" => c.use_c = false,
        "no_hard_soft" => {
            c.use_hard = false;
            c.use_soft = false;
        }
        "no_d_soft" => {
            c.use_d = false;
            c.use_soft = false;
        }
        "no_soft" => c.use_soft = false,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation {other:?}; expected one of {}",
                ABLATIONS.join(", ")
            )))
        }
    }
    Ok(c)
}

/// Vocabulary over both sides of the training pairs.
pub fn build_vocab(pairs: &[PairedExample], min_freq: usize) -> Result<Vocab> {
    Vocab::build(pairs.iter().flat_map(|p| [p.clean.as_str(), p.asr.as_str()]), min_freq)
}

/// Fresh encoder without classification heads.
pub fn init_model(vocab: &Vocab, cfg: &TrainingConfig) -> Result<Encoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Encoder::new(cfg.encoder_config(vocab.len()), &[], &mut rng)
}

/// Everything one pipeline run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub pretrain_log: Vec<PretrainRecord>,
    pub finetune_log: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Optionally pre-trains on `train` pairs, fine-tunes on the same examples
/// and evaluates on `test`.
pub fn run(
    name: &str,
    train: &[PairedExample],
    test: &[PairedExample],
    cfg: &TrainingConfig,
    do_pretrain: bool,
    buckets: &WerBuckets,
) -> Result<RunOutput> {
    cfg.validate()?;
    let vocab = build_vocab(train, cfg.min_freq)?;
    let space = LabelSpace::from_examples(train)?;
    let mut model = init_model(&vocab, cfg)?;
    let mut pretrain_log = Vec::new();
    if do_pretrain {
        let out = pretrain(model, &vocab, train, cfg)?;
        model = out.model;
        pretrain_log = out.log;
    }
    let data = RunData { vocab: &vocab, space: &space, train, test, buckets };
    let (report, finetune_log, checkpoint) = fit_and_evaluate(name, model, &data, cfg)?;
    Ok(RunOutput {
        report,
        pretrain_log,
        finetune_log,
        checkpoint,
    })
}

struct RunData<'a> {
    vocab: &'a Vocab,
    space: &'a LabelSpace,
    train: &'a [PairedExample],
    test: &'a [PairedExample],
    buckets: &'a WerBuckets,
}

fn fit_and_evaluate(
    name: &str,
    model: Encoder,
    data: &RunData<'_>,
    cfg: &TrainingConfig,
) -> Result<(EvalReport, Vec<EpochRecord>, Checkpoint)> {
    let model = model.with_heads(&data.space.head_sizes())?;
    let ft = finetune(model, data.vocab, data.space, data.train, cfg)?;
    let mut report = evaluate(name, &ft.model, data.vocab, data.space, data.test, data.buckets)?;
    report.seeds = vec![cfg.seed];
    report.config = Some(serde_json::to_value(cfg)?);
    let checkpoint = Checkpoint::new(&ft.model, data.vocab, data.space.heads.clone())?;
    Ok((report, ft.history, checkpoint))
}

/// Reports of the three-way robustness comparison for one seed.
#[derive(Clone, Debug)]
pub struct Comparison {
    /// MLM-only pre-training, cross-entropy fine-tuning.
    pub mlm_ce: EvalReport,
    /// Contrastive + MLM pre-training, cross-entropy fine-tuning.
    pub contrastive_ce: EvalReport,
    /// Contrastive + MLM pre-training, full fine-tuning objective.
    pub contrastive_full: EvalReport,
}

/// Runs the comparison from a common initialization. The contrastive
/// pre-train is shared by both of its fine-tuning variants. `cfg`'s loss
/// switches describe the full setting.
pub fn compare(
    train: &[PairedExample],
    test: &[PairedExample],
    cfg: &TrainingConfig,
    buckets: &WerBuckets,
) -> Result<Comparison> {
    cfg.validate()?;
    let vocab = build_vocab(train, cfg.min_freq)?;
    let space = LabelSpace::from_examples(train)?;
    let init = init_model(&vocab, cfg)?;
    let data = RunData { vocab: &vocab, space: &space, train, test, buckets };
    let ce = cfg.clone().ce_only();
    let mlm_only = TrainingConfig { use_c: false, ..ce.clone() };

    let mlm = pretrain(init.clone(), &vocab, train, &mlm_only)?.model;
    let mlm_ce = fit_and_evaluate("mlm+ce", mlm, &data, &mlm_only)?.0;
    let contrastive = pretrain(init, &vocab, train, cfg)?.model;
    let contrastive_ce = fit_and_evaluate("contrastive+ce", contrastive.clone(), &data, &ce)?.0;
    let contrastive_full = fit_and_evaluate("contrastive+full", contrastive, &data, cfg)?.0;
    Ok(Comparison {
        mlm_ce,
        contrastive_ce,
        contrastive_full,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (population) standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Primary metric across seeds, overall and per bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub overall: MeanStd,
    /// `(bucket, mean/std over seeds where the bucket is nonempty)`.
    pub buckets: Vec<(String, Option<MeanStd>)>,
}

impl SeedSummary {
    pub fn from_reports(name: &str, reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::EmptyBatch("no reports to aggregate".into()))?;
        let overall: Vec<f64> = reports.iter().map(|r| r.overall.primary()).collect();
        let buckets = first
            .buckets
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| r.bucket_metrics()[k]).collect();
                (b.bucket.clone(), (!vals.is_empty()).then(|| MeanStd::of(&vals)))
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
            overall: MeanStd::of(&overall),
            buckets,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{} (seeds {:?})\n", self.name, self.seeds);
        for (name, m) in self.buckets.iter().map(|(n, m)| (n.as_str(), m.as_ref())).chain([("all", Some(&self.overall))]) {
            match m {
                Some(m) => out.push_str(&format!("{name:<10} {:>7.2} ± {:.2}\n", 100.0 * m.mean, 100.0 * m.std)),
                None => out.push_str(&format!("{name:<10} {:>7}\n", "-")),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_switch_the_right_terms() {
        let base = TrainingConfig::default();
        let c = ablation("no_d_soft", &base).unwrap();
        assert!(!c.use_d && !c.use_soft && c.use_hard && c.use_c && c.use_mlm);
        let c = ablation("no_hard_soft", &base).unwrap();
        assert!(!c.use_hard && !c.use_soft && c.use_d);
        assert!(!ablation("no_mlm", &base).unwrap().use_mlm);
        assert!(!ablation("no_c", &base).unwrap().use_c);
        assert!(!ablation("no_soft", &base).unwrap().use_soft);
        assert_eq!(ablation("full", &base).unwrap(), base);
        assert!(ablation("bogus", &base).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
    }
}
