use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Triangular};
use serde::{Deserialize, Serialize};

use super::wer::edit_distance;
use crate::error::{Error, Result};
use crate::textproc::tokenize;

/// Parameters of the synthetic recognition-error channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Median of the per-utterance target error rate.
    pub target_wer_median: f64,
    /// Half-width of the triangular distribution around the median.
    pub wer_spread: f64,
    pub sub_frac: f64,
    pub del_frac: f64,
    pub ins_frac: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            target_wer_median: 0.25,
            wer_spread: 0.3,
            sub_frac: 0.7,
            del_frac: 0.15,
            ins_frac: 0.15,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_wer_median) {
            return Err(Error::Config(format!(
                "target WER median must lie in [0, 1), got {}",
                self.target_wer_median
            )));
        }
        if !(self.wer_spread >= 0.0 && self.wer_spread.is_finite()) {
            return Err(Error::Config(format!("WER spread must be >= 0, got {}", self.wer_spread)));
        }
        let mix = [self.sub_frac, self.del_frac, self.ins_frac];
        if mix.iter().any(|m| !(*m >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "substitution/deletion/insertion mix must be nonnegative and sum to 1, got {mix:?}"
            )));
        }
        Ok(())
    }
}

/// Short words used for insertions.
pub const FILLERS: [&str; 8] = ["the", "a", "uh", "um", "to", "and", "in", "of"];

/// Word-level corruption channel.
///
/// Each utterance draws a target error rate `t` from a triangular
/// distribution (clamped to `[0, 1)`), then edits `k` distinct word
/// positions where `k` is `t·n` rounded stochastically. A substitution
/// swaps in the lexicon word with the smallest character edit distance, a
/// deletion drops the word and an insertion places a filler before it.
/// At most one edit touches each reference word, so the achieved WER never
/// exceeds 1.
#[derive(Clone, Debug)]
pub struct NoiseChannel {
    cfg: NoiseConfig,
    lexicon: Vec<String>,
    nearest: HashMap<String, Vec<String>>,
}

impl NoiseChannel {
    pub fn new<I, S>(cfg: NoiseConfig, lexicon: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        cfg.validate()?;
        let lexicon: Vec<String> = lexicon
            .into_iter()
            .flat_map(|w| tokenize(w.as_ref()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if lexicon.len() < 2 {
            return Err(Error::Config("substitution lexicon needs at least two words".into()));
        }
        let mut channel = Self {
            cfg,
            lexicon,
            nearest: HashMap::new(),
        };
        let nearest = channel
            .lexicon
            .iter()
            .map(|w| (w.clone(), channel.find_nearest(w)))
            .collect();
        channel.nearest = nearest;
        Ok(channel)
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.cfg
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    fn find_nearest(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut best = usize::MAX;
        let mut out = Vec::new();
        for cand in &self.lexicon {
            if cand == word {
                continue;
            }
            let d = edit_distance(&chars, &cand.chars().collect::<Vec<_>>());
            if d < best {
                best = d;
                out.clear();
            }
            if d == best {
                out.push(cand.clone());
            }
        }
        out
    }

    /// Lexicon words closest to `word` in character edit distance.
    pub fn confusions(&self, word: &str) -> Vec<String> {
        match self.nearest.get(word) {
            Some(v) => v.clone(),
            None => self.find_nearest(word),
        }
    }

    fn draw_target<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = self.cfg.target_wer_median;
        let s = self.cfg.wer_spread;
        // a zero median disables the channel rather than leaving half the
        // clamped distribution above zero
        let t = if s == 0.0 || m == 0.0 {
            m
        } else {
            Triangular::new(m - s, m + s, m)
                .expect("valid triangular")
                .sample(rng)
        };
        t.clamp(0.0, 1.0 - 1e-12)
    }

    /// Corrupts one utterance. Deterministic given the generator state.
    /// Utterances that draw no edits are returned verbatim; edited ones come
    /// back lowercased and single-spaced.
    pub fn apply<R: Rng + ?Sized>(&self, clean: &str, rng: &mut R) -> String {
        let words = tokenize(clean);
        let n = words.len();
        let target = self.draw_target(rng);
        if n == 0 || target == 0.0 {
            return clean.to_string();
        }
        let exact = target * n as f64;
        let mut k = exact.floor() as usize;
        if rng.random::<f64>() < exact - exact.floor() {
            k += 1;
        }
        let k = k.min(n);
        if k == 0 {
            return clean.to_string();
        }
        let chosen: BTreeSet<usize> = rand::seq::index::sample(rng, n, k).into_iter().collect();
        let mut out = Vec::with_capacity(n + k);
        for (i, w) in words.into_iter().enumerate() {
            if !chosen.contains(&i) {
                out.push(w);
                continue;
            }
            let roll = rng.random::<f64>();
            if roll < self.cfg.sub_frac {
                let cands = self.confusions(&w);
                out.push(cands.choose(rng).cloned().unwrap_or(w));
            } else if roll < self.cfg.sub_frac + self.cfg.del_frac {
                continue;
            } else {
                let filler = FILLERS.choose(rng).expect("fillers nonempty");
                out.push((*filler).to_string());
                out.push(w);
            }
        }
        out.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::wer::wer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel(cfg: NoiseConfig) -> NoiseChannel {
        NoiseChannel::new(
            cfg,
            ["turn on the light in the kitchen", "flight night right one in an of"],
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        let bad_mix = NoiseConfig {
            sub_frac: 0.5,
            ..NoiseConfig::default()
        };
        assert!(bad_mix.validate().is_err());
        let bad_median = NoiseConfig {
            target_wer_median: 1.0,
            ..NoiseConfig::default()
        };
        assert!(bad_median.validate().is_err());
    }

    #[test]
    fn zero_target_is_identity() {
        let c = channel(NoiseConfig {
            target_wer_median: 0.0,
            ..NoiseConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in ["turn on the light", "A  b c d e f", "kitchen"] {
            assert_eq!(c.apply(s, &mut rng), s);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let c = channel(NoiseConfig::default());
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| c.apply("turn on the light in the kitchen", &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn substitutions_use_nearest_words() {
        let c = channel(NoiseConfig::default());
        let mut near = c.confusions("light");
        near.sort();
        assert_eq!(near, ["flight", "night", "right"]);
        assert!(c.confusions("on").contains(&"one".to_string()));
    }

    #[test]
    fn achieved_wer_is_bounded_by_one() {
        let c = channel(NoiseConfig {
            target_wer_median: 0.9,
            wer_spread: 0.5,
            sub_frac: 0.0,
            del_frac: 0.0,
            ins_frac: 1.0,
            seed: 0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let noisy = c.apply("turn on the light in the kitchen", &mut rng);
            assert!(wer("turn on the light in the kitchen", &noisy).unwrap() <= 1.0);
        }
    }
}
