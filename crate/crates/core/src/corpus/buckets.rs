use serde::{Deserialize, Serialize};

use super::PairedExample;
use crate::error::{Error, Result};

/// One WER interval `(previous upper, upper]`; the first interval starts at 0 inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub upper: f64,
}

/// Ordered, disjoint WER intervals covering `[0, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerBuckets {
    buckets: Vec<Bucket>,
}

impl WerBuckets {
    /// `uppers` must be nondecreasing; the last bucket is unbounded.
    pub fn new(names: &[&str], uppers: &[f64]) -> Result<Self> {
        if names.len() != uppers.len() + 1 {
            return Err(Error::Config(format!(
                "{} bucket names need {} finite bounds, got {}",
                names.len(),
                names.len().saturating_sub(1),
                uppers.len()
            )));
        }
        if uppers.iter().any(|u| !u.is_finite() || *u < 0.0) || uppers.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("bucket bounds {uppers:?} must be finite, >= 0 and nondecreasing")));
        }
        let buckets = names
            .iter()
            .zip(uppers.iter().copied().chain([f64::INFINITY]))
            .map(|(n, u)| Bucket {
                name: (*n).to_string(),
                upper: u,
            })
            .collect();
        Ok(Self { buckets })
    }

    /// `=0`, `(0, 0.16]`, `(0.16, 0.4]`, `>0.4`.
    pub fn google() -> Self {
        Self::new(&["clean", "low", "medium", "high"], &[0.0, 0.16, 0.4]).expect("valid preset")
    }

    /// `[0, 0.25]`, `(0.25, 0.5]`, `(0.5, 0.83]`, `>0.83`.
    pub fn wav2vec() -> Self {
        Self::new(&["low", "medium", "high", "severe"], &[0.25, 0.5, 0.83]).expect("valid preset")
    }

    /// Four buckets split at the empirical quartiles of `wers`. Values equal
    /// to a boundary fall into the lower bucket.
    pub fn quartiles(wers: &[f64]) -> Result<Self> {
        if wers.is_empty() {
            return Err(Error::EmptyBatch("quartiles of an empty WER list".into()));
        }
        let mut sorted = wers.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        Self::new(&["q1", "q2", "q3", "q4"], &[q(0.25), q(0.5), q(0.75)])
    }

    /// Preset by name: `google`, `wav2vec` or `quartile` (fitted to `wers`).
    pub fn by_name(name: &str, wers: &[f64]) -> Result<Self> {
        match name {
            "google" => Ok(Self::google()),
            "wav2vec" => Ok(Self::wav2vec()),
            "quartile" => Self::quartiles(wers),
            other => Err(Error::Config(format!(
                "unknown bucket scheme {other:?} (expected google, wav2vec or quartile)"
            ))),
        }
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    pub fn names(&self) -> Vec<&str> {
        self.buckets.iter().map(|b| b.name.as_str()).collect()
    }

    /// Index of the bucket containing `wer`.
    pub fn index_of(&self, wer: f64) -> usize {
        self.buckets
            .iter()
            .position(|b| wer <= b.upper)
            .unwrap_or(self.buckets.len() - 1)
    }

    pub fn name_of(&self, wer: f64) -> &str {
        &self.buckets[self.index_of(wer)].name
    }

    /// Example indices per bucket, in bucket order.
    pub fn assign(&self, wers: &[f64]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.buckets.len()];
        for (i, w) in wers.iter().enumerate() {
            out[self.index_of(*w)].push(i);
        }
        out
    }
}

/// Groups examples by WER bucket. Every example lands in exactly one bucket.
pub fn bucketize<'a>(
    examples: &'a [PairedExample],
    buckets: &WerBuckets,
) -> Vec<(String, Vec<&'a PairedExample>)> {
    let wers: Vec<f64> = examples.iter().map(|e| e.wer).collect();
    buckets
        .assign(&wers)
        .into_iter()
        .zip(buckets.buckets())
        .map(|(idx, b)| (b.name.clone(), idx.into_iter().map(|i| &examples[i]).collect()))
        .collect()
}
