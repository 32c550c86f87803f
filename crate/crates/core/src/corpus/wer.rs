use crate::error::{Error, Result};
use crate::textproc::tokenize;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: word-level edit distance over the reference length,
/// after lowercasing and whitespace splitting.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = tokenize(reference);
    if r.is_empty() {
        return Err(Error::UndefinedWer(format!(
            "reference {reference:?} has no words"
        )));
    }
    let h = tokenize(hypothesis);
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}
