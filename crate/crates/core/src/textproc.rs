//! Word-level vocabulary, `[CLS]`-prefixed encoding and MLM masking.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from a corpus. Tokens are numbered in order of
    /// first appearance; those seen fewer than `min_freq` times are dropped.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut lines = 0;
        for text in corpus {
            lines += 1;
            for tok in tokenize(text.as_ref()) {
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            order
                .into_iter()
                .filter(|t| counts[t] >= min_freq.max(1) && !RESERVED.contains(&t.as_str())),
        );
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tab-separated `token\tid` lines ordered by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse {
                path: "vocab".into(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected `token<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| parse_err("bad id"))?;
            if id != tokens.len() {
                return Err(parse_err("ids must be contiguous from 0"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Config("vocabulary is missing the reserved tokens".into()));
        }
        Ok(Self::from(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_tsv(&text)
    }
}

/// Token ids of one utterance; `ids[0]` is always `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSeq {
    /// The non-padding prefix.
    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }
}

pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len - 1)
            .map(|t| vocab.id(t)),
    );
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    TokenSeq { ids, true_length }
}

/// Output of [`apply_mlm_mask`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSeq {
    pub seq: TokenSeq,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects each maskable position with probability `ratio`; a selected
/// token becomes `[MASK]` 80% of the time, a random word 10%, and stays
/// unchanged otherwise. Reserved tokens are never selected.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    seq: &TokenSeq,
    ratio: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSeq> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let mut out = seq.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for pos in 1..seq.true_length {
        let id = seq.ids[pos];
        if id < RESERVED.len() {
            continue;
        }
        if rng.random::<f64>() >= ratio {
            continue;
        }
        positions.push(pos);
        targets.push(id);
        let roll = rng.random::<f64>();
        if roll < 0.8 {
            out.ids[pos] = MASK;
        } else if roll < 0.9 && vocab_size > RESERVED.len() {
            out.ids[pos] = rng.random_range(RESERVED.len()..vocab_size);
        }
    }
    Ok(MaskedSeq {
        seq: out,
        positions,
        targets,
    })
}
