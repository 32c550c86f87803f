use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_values, Tensor};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::textproc::TokenSeq;

/// Previous-epoch class distributions for every training item.
///
/// `probs[h]` is an `[N, C_h]` matrix whose row `i` belongs to `ids[i]`.
/// `epoch` is the epoch that produced the predictions; 0 means one-hot labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionCache {
    pub epoch: usize,
    pub ids: Vec<String>,
    pub probs: Vec<Tensor>,
}

impl PredictionCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Per-head rows for `items`, in order.
    pub fn rows(&self, items: &[usize]) -> Result<Vec<Tensor>> {
        self.probs
            .iter()
            .map(|p| {
                let mut rows = Vec::with_capacity(items.len());
                for &i in items {
                    if i >= self.ids.len() {
                        return Err(Error::Invariant(format!(
                            "item {i} has no cached prediction (cache holds {})",
                            self.ids.len()
                        )));
                    }
                    rows.push(p.row(i).to_vec());
                }
                Tensor::from_rows(&rows)
            })
            .collect()
    }

    /// Checks that every row of every head is a probability vector.
    pub fn check(&self) -> Result<()> {
        for (h, p) in self.probs.iter().enumerate() {
            if p.rows() != self.ids.len() {
                return Err(Error::Invariant(format!("head {h} caches {} rows for {} items", p.rows(), self.ids.len())));
            }
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Invariant(format!("cached row {i} of head {h} sums to {s}")));
                }
            }
        }
        Ok(())
    }
}

/// One-hot distributions of the gold labels. `labels[i][h]` is item `i`'s
/// class for head `h`.
pub fn init_cache(ids: &[String], labels: &[Vec<usize>], head_sizes: &[usize]) -> Result<PredictionCache> {
    if ids.len() != labels.len() {
        return Err(Error::Shape(format!("{} ids for {} labels", ids.len(), labels.len())));
    }
    let mut probs: Vec<Tensor> = head_sizes.iter().map(|&c| Tensor::zeros(&[ids.len(), c])).collect();
    for (i, l) in labels.iter().enumerate() {
        if l.len() != head_sizes.len() {
            return Err(Error::UnknownLabel(format!("item {} has {} label parts for {} heads", ids[i], l.len(), head_sizes.len())));
        }
        for (h, (&y, &c)) in l.iter().zip(head_sizes).enumerate() {
            if y >= c {
                return Err(Error::UnknownLabel(format!("class {y} of head {h} exceeds {c} classes")));
            }
            probs[h].data_mut()[i * c + y] = 1.0;
        }
    }
    Ok(PredictionCache {
        epoch: 0,
        ids: ids.to_vec(),
        probs,
    })
}

/// `softmax(logits / τ_d)` per head from a dropout-free pass over `seqs`.
pub fn snapshot_predictions(
    model: &Encoder,
    ids: &[String],
    seqs: &[TokenSeq],
    tau_d: f64,
    epoch: usize,
) -> Result<PredictionCache> {
    if ids.len() != seqs.len() {
        return Err(Error::Shape(format!("{} ids for {} sequences", ids.len(), seqs.len())));
    }
    let logits = model.predict_logits(seqs)?;
    let probs = logits
        .into_iter()
        .map(|l| {
            let c = l.cols();
            let mut data = Vec::with_capacity(l.numel());
            for i in 0..l.rows() {
                data.extend(softmax_values(l.row(i), tau_d)?);
            }
            Tensor::new(vec![seqs.len(), c], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionCache {
        epoch,
        ids: ids.to_vec(),
        probs,
    })
}
