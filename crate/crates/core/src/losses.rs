//! Training objectives.
//!
//! Pre-training: paired contrastive loss over clean/ASR representations plus
//! masked-language-model cross-entropy. Fine-tuning: cross-entropy, a
//! hard-label supervised contrastive loss, KL self-distillation against the
//! previous epoch's predictions, and a contrastive loss weighted by the
//! similarity of those previous predictions.
//!
//! All contrastive terms share one shape: for anchor `i`,
//! `log( e^{s(h_i,h_j)/τ} / Σ_{k≠i} e^{s(h_i,h_k)/τ} )` with cosine `s`,
//! weighted per pair and normalized by a batch-size constant.

use serde::{Deserialize, Serialize};

use crate::diffcore::{check_temperature, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tau_c: f64,
    pub tau_sc: f64,
    pub tau_d: f64,
    pub lambda_mlm: f64,
    pub lambda_sc: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau_c: 0.2,
            tau_sc: 0.2,
            tau_d: 5.0,
            lambda_mlm: 1.0,
            lambda_sc: 0.1,
            lambda_d: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for t in [self.tau_c, self.tau_sc, self.tau_d] {
            check_temperature(t)?;
        }
        for (name, w) in [
            ("lambda_mlm", self.lambda_mlm),
            ("lambda_sc", self.lambda_sc),
            ("lambda_d", self.lambda_d),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Index-aligned clean and ASR representations, each `[N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch {
    pub clean: Var,
    pub asr: Var,
}

/// Representations with labels and previous-epoch predictions.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// `[N, D]`.
    pub reps: Var,
    /// One key per row; equal keys mean equal (joint) labels.
    pub labels: Vec<usize>,
    /// Per head, `[N, C_h]` rows of probability vectors.
    pub prev_probs: Vec<Tensor>,
}

fn rows_of(tape: &Tape, v: Var) -> Result<usize> {
    match tape.value(v).shape() {
        [n, _] => Ok(*n),
        s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
    }
}

/// `-(1/norm) Σ_i Σ_{j≠i} w_ij log softmax_{k≠i}(s(h_i,h_k)/τ)_j`.
fn weighted_contrastive(
    tape: &mut Tape,
    reps: Var,
    weights: Vec<f64>,
    tau: f64,
    norm: f64,
) -> Result<Var> {
    let unit = tape.normalize_rows(reps)?;
    let sim = tape.matmul(unit, unit, true)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let log_p = tape.log_softmax_rows(logits, true)?;
    let total = tape.weighted_sum(log_p, weights)?;
    Ok(tape.scale(total, -1.0 / norm))
}

/// Paired contrastive loss over the `2N` pooled representations; each of
/// the `2N` directed pairs `(clean_i, asr_i)`, `(asr_i, clean_i)` is a positive.
pub fn l_c(tape: &mut Tape, batch: &ContrastiveBatch, tau_c: f64) -> Result<Var> {
    check_temperature(tau_c)?;
    let n = rows_of(tape, batch.clean)?;
    if rows_of(tape, batch.asr)? != n {
        return Err(Error::Shape("clean and ASR batches differ in size".into()));
    }
    if n == 0 {
        return Err(Error::EmptyBatch("contrastive loss needs at least one pair".into()));
    }
    let pooled = tape.concat_rows(&[batch.clean, batch.asr])?;
    let m = 2 * n;
    let mut w = vec![0.0; m * m];
    for i in 0..n {
        w[i * m + (i + n)] = 1.0;
        w[(i + n) * m + i] = 1.0;
    }
    weighted_contrastive(tape, pooled, w, tau_c, m as f64)
}

/// Mean cross-entropy at masked positions; zero when nothing was masked.
pub fn l_mlm(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    if rows_of(tape, logits)? == 0 && targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.cross_entropy_rows(logits, targets)
}

/// `l_c + λ_mlm · l_mlm`.
pub fn l_pt(tape: &mut Tape, l_c: Var, l_mlm: Var, lambda_mlm: f64) -> Result<Var> {
    let scaled = tape.scale(l_mlm, lambda_mlm);
    tape.add(l_c, scaled)
}

/// Hard-label supervised contrastive loss with `1/N` outer normalization.
pub fn l_hard(tape: &mut Tape, reps: Var, labels: &[usize], tau_sc: f64) -> Result<Var> {
    check_temperature(tau_sc)?;
    let n = rows_of(tape, reps)?;
    if n < 2 {
        return Err(Error::EmptyBatch(format!("supervised contrastive loss needs N >= 2, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                w[i * n + j] = 1.0;
            }
        }
    }
    weighted_contrastive(tape, reps, w, tau_sc, n as f64)
}

fn check_probs(probs: &Tensor, n: usize) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != n {
        return Err(Error::Shape(format!(
            "previous predictions {:?} do not cover {n} rows",
            probs.shape()
        )));
    }
    for (i, row) in probs.to_rows().iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| *p < 0.0 || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "previous prediction row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Mean `KL(prev_i ‖ softmax(current_i / τ_d))`. `prev` is constant.
pub fn l_d(tape: &mut Tape, current_logits: Var, prev: &Tensor, tau_d: f64) -> Result<Var> {
    check_temperature(tau_d)?;
    let n = rows_of(tape, current_logits)?;
    if n == 0 {
        return Err(Error::EmptyBatch("distillation over zero rows".into()));
    }
    check_probs(prev, n)?;
    if prev.shape() != tape.value(current_logits).shape() {
        return Err(Error::Shape("previous and current predictions differ in shape".into()));
    }
    let neg_entropy: f64 = prev
        .data()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum();
    let scaled = tape.scale(current_logits, 1.0 / tau_d);
    let log_q = tape.log_softmax_rows(scaled, false)?;
    let cross = tape.weighted_sum(log_q, prev.data().to_vec())?;
    // Σ p log p − Σ p log q, over N rows
    let kl = tape.scale(cross, -1.0 / n as f64);
    Ok(tape.add_scalar(kl, neg_entropy / n as f64))
}

/// Soft contrastive loss: pair weights are inner products of previous
/// prediction rows, `prev_i · prev_j`, held constant.
pub fn l_soft(tape: &mut Tape, reps: Var, prev: &Tensor, tau_sc: f64) -> Result<Var> {
    check_temperature(tau_sc)?;
    let n = rows_of(tape, reps)?;
    if n < 2 {
        return Err(Error::EmptyBatch(format!("soft contrastive loss needs N >= 2, got {n}")));
    }
    check_probs(prev, n)?;
    let rows = prev.to_rows();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i * n + j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            }
        }
    }
    weighted_contrastive(tape, reps, w, tau_sc, n as f64)
}

/// `L_ce + λ_d·L_d + λ_sc·(L_hard + λ_d·L_soft)`.
pub fn l_ft(
    tape: &mut Tape,
    l_ce: Var,
    l_d: Var,
    l_hard: Var,
    l_soft: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let soft = tape.scale(l_soft, weights.lambda_d);
    let contrast = tape.add(l_hard, soft)?;
    let contrast = tape.scale(contrast, weights.lambda_sc);
    let distill = tape.scale(l_d, weights.lambda_d);
    let out = tape.add(l_ce, distill)?;
    tape.add(out, contrast)
}

/// Sum over heads of each head's mean cross-entropy.
pub fn l_ce_multihead(tape: &mut Tape, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Config(format!(
            "{} heads of logits for {} label sets",
            logits.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (l, y) in logits.iter().zip(labels) {
        let ce = tape.cross_entropy_rows(*l, y)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    Ok(total.expect("at least one head"))
}

impl LabeledBatch {
    pub fn hard(&self, tape: &mut Tape, tau_sc: f64) -> Result<Var> {
        l_hard(tape, self.reps, &self.labels, tau_sc)
    }

    /// Per-head soft contrastive losses, summed.
    pub fn soft(&self, tape: &mut Tape, tau_sc: f64) -> Result<Var> {
        let mut total: Option<Var> = None;
        for p in &self.prev_probs {
            let l = l_soft(tape, self.reps, p, tau_sc)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        total.ok_or_else(|| Error::Config("no prediction heads".into()))
    }

    /// Per-head distillation losses against `logits`, summed.
    pub fn distill(&self, tape: &mut Tape, logits: &[Var], tau_d: f64) -> Result<Var> {
        if logits.len() != self.prev_probs.len() || logits.is_empty() {
            return Err(Error::Config(format!(
                "{} heads of logits for {} cached heads",
                logits.len(),
                self.prev_probs.len()
            )));
        }
        let mut total: Option<Var> = None;
        for (l, p) in logits.iter().zip(&self.prev_probs) {
            let d = l_d(tape, *l, p, tau_d)?;
            total = Some(match total {
                None => d,
                Some(t) => tape.add(t, d)?,
            });
        }
        Ok(total.expect("at least one head"))
    }
}
