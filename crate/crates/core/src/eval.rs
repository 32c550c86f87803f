//! Accuracy metrics and WER-bucketed evaluation reports.

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, PairedExample, WerBuckets};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::textproc::{encode, Vocab};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} gold labels")));
    }
    if a == 0 {
        return Err(Error::EmptyBatch("no predictions to score".into()));
    }
    Ok(())
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of positions where every component of the prediction is right.
pub fn joint_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Index of the largest entry; the first wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per head for each ASR hypothesis.
pub fn predict(model: &Encoder, vocab: &Vocab, texts: &[&str]) -> Result<Vec<Vec<usize>>> {
    let seqs: Vec<_> = texts
        .iter()
        .map(|t| encode(t, vocab, model.config().max_len))
        .collect();
    let logits = model.predict_logits(&seqs)?;
    Ok((0..seqs.len())
        .map(|i| logits.iter().map(|l| argmax(l.row(i))).collect())
        .collect())
}

/// Accuracy over a set of examples. With several heads, `accuracy` is the
/// mean of per-head accuracies and `joint_accuracy` requires all heads right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub accuracy: f64,
    pub joint_accuracy: Option<f64>,
}

impl Scores {
    pub fn compute(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<Self> {
        check_lengths(pred.len(), gold.len())?;
        let heads = gold[0].len();
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let p: Vec<usize> = pred.iter().map(|r| r[h]).collect();
            let g: Vec<usize> = gold.iter().map(|r| r[h]).collect();
            per_head.push(accuracy(&p, &g)?);
        }
        Ok(Self {
            n: pred.len(),
            accuracy: per_head.iter().sum::<f64>() / heads as f64,
            joint_accuracy: if heads > 1 {
                Some(joint_accuracy(pred, gold)?)
            } else {
                None
            },
        })
    }

    /// Joint accuracy when there are several heads, plain accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.joint_accuracy.unwrap_or(self.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub n: usize,
    /// `None` for an empty bucket.
    pub scores: Option<Scores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub overall: Scores,
    pub buckets: Vec<BucketRow>,
    pub seeds: Vec<u64>,
    pub config: Option<serde_json::Value>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn is_joint(&self) -> bool {
        self.overall.joint_accuracy.is_some()
    }

    /// `bucket,n,accuracy[,joint_accuracy]`, one row per bucket then `all`.
    pub fn to_csv(&self) -> String {
        let joint = self.is_joint();
        let mut out = String::from(if joint { "bucket,n,accuracy,joint_accuracy\n" } else { "bucket,n,accuracy\n" });
        let rows = self
            .buckets
            .iter()
            .map(|b| (b.bucket.as_str(), b.n, b.scores.as_ref()))
            .chain([("all", self.overall.n, Some(&self.overall))]);
        for (name, n, s) in rows {
            out.push_str(&format!("{name},{n},{}", fmt_opt(s.map(|s| s.accuracy))));
            if joint {
                out.push_str(&format!(",{}", fmt_opt(s.and_then(|s| s.joint_accuracy))));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{}\n{:<10} {:>6} {:>9}", self.name, "bucket", "n", "accuracy");
        if self.is_joint() {
            out.push_str(&format!(" {:>9}", "joint"));
        }
        out.push('\n');
        let rows = self
            .buckets
            .iter()
            .map(|b| (b.bucket.as_str(), b.n, b.scores.as_ref()))
            .chain([("all", self.overall.n, Some(&self.overall))]);
        for (name, n, s) in rows {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
            out.push_str(&format!("{name:<10} {n:>6} {:>9}", pct(s.map(|s| s.accuracy))));
            if self.is_joint() {
                out.push_str(&format!(" {:>9}", pct(s.and_then(|s| s.joint_accuracy))));
            }
            out.push('\n');
        }
        out
    }

    /// Primary metric per bucket (`None` when empty).
    pub fn bucket_metrics(&self) -> Vec<Option<f64>> {
        self.buckets.iter().map(|b| b.scores.as_ref().map(Scores::primary)).collect()
    }
}

/// Scores `model` on the ASR side of `examples`, overall and per WER bucket.
pub fn evaluate(
    name: &str,
    model: &Encoder,
    vocab: &Vocab,
    space: &LabelSpace,
    examples: &[PairedExample],
    buckets: &WerBuckets,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch("no examples to evaluate".into()));
    }
    let gold: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| space.indices(&e.label))
        .collect::<Result<_>>()?;
    let texts: Vec<&str> = examples.iter().map(|e| e.asr.as_str()).collect();
    let pred = predict(model, vocab, &texts)?;
    let wers: Vec<f64> = examples.iter().map(|e| e.wer).collect();
    let rows = buckets
        .assign(&wers)
        .into_iter()
        .zip(buckets.buckets())
        .map(|(idx, b)| {
            let scores = if idx.is_empty() {
                None
            } else {
                let p: Vec<_> = idx.iter().map(|&i| pred[i].clone()).collect();
                let g: Vec<_> = idx.iter().map(|&i| gold[i].clone()).collect();
                Some(Scores::compute(&p, &g)?)
            };
            Ok(BucketRow {
                bucket: b.name.clone(),
                n: idx.len(),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        name: name.to_string(),
        overall: Scores::compute(&pred, &gold)?,
        buckets: rows,
        seeds: Vec::new(),
        config: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn joint_accuracy_cases() {
        let gold = vec![vec![1, 2], vec![0, 0], vec![3, 1]];
        assert_eq!(joint_accuracy(&gold, &gold).unwrap(), 1.0);
        let half: Vec<_> = gold.iter().map(|g| vec![g[0], g[1] + 1]).collect();
        assert_eq!(joint_accuracy(&half, &gold).unwrap(), 0.0);
        let mixed = vec![vec![1, 2], vec![0, 0], vec![3, 0]];
        assert!((joint_accuracy(&mixed, &gold).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(joint_accuracy(&mixed[..2], &gold), Err(Error::Shape(_))));
        assert!(joint_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn scores_average_heads() {
        let gold = vec![vec![1, 2], vec![0, 0]];
        let pred = vec![vec![1, 0], vec![0, 0]];
        let s = Scores::compute(&pred, &gold).unwrap();
        assert_eq!(s.accuracy, 0.75);
        assert_eq!(s.joint_accuracy, Some(0.5));
        assert_eq!(s.primary(), 0.5);
        let single = Scores::compute(&[vec![1], vec![0]], &[vec![1], vec![1]]).unwrap();
        assert_eq!(single.joint_accuracy, None);
        assert_eq!(single.primary(), 0.5);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn csv_layout() {
        let s = |a, j| Scores {
            n: 2,
            accuracy: a,
            joint_accuracy: j,
        };
        let report = EvalReport {
            name: "x".into(),
            overall: s(0.5, Some(0.25)),
            buckets: vec![
                BucketRow {
                    bucket: "clean".into(),
                    n: 2,
                    scores: Some(s(0.5, Some(0.25))),
                },
                BucketRow {
                    bucket: "low".into(),
                    n: 0,
                    scores: None,
                },
            ],
            seeds: vec![],
            config: None,
        };
        assert_eq!(
            report.to_csv(),
            "bucket,n,accuracy,joint_accuracy\nclean,2,0.500000,0.250000\nlow,0,,\nall,2,0.500000,0.250000\n"
        );
        assert!(report.to_table().contains("clean"));
    }

    proptest! {
        #[test]
        fn joint_never_exceeds_either_head(
            rows in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3, 0usize..3), 1..60)
        ) {
            let pred: Vec<Vec<usize>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let gold: Vec<Vec<usize>> = rows.iter().map(|r| vec![r.2, r.3]).collect();
            let joint = joint_accuracy(&pred, &gold).unwrap();
            for h in 0..2 {
                let p: Vec<usize> = pred.iter().map(|r| r[h]).collect();
                let g: Vec<usize> = gold.iter().map(|r| r[h]).collect();
                prop_assert!(joint <= accuracy(&p, &g).unwrap());
            }
        }
    }
}
