//! Small pre-layer-norm transformer encoder with an MLM head and
//! classification heads over the shared `[CLS]` representation.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::textproc::{encode, TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_prob: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, width 64, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
            dropout_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob must lie in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    final_ln: (usize, usize),
    mlm: (usize, usize),
    heads: Vec<(usize, usize)>,
}

fn param_shapes(cfg: &EncoderConfig, head_sizes: &[usize]) -> Vec<(String, Vec<usize>)> {
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.max_len, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ff.w1"), vec![d, f]),
            (p("ff.b1"), vec![f]),
            (p("ff.w2"), vec![f, d]),
            (p("ff.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("final_ln.gain".to_string(), vec![d]),
        ("final_ln.bias".to_string(), vec![d]),
        ("mlm.w".to_string(), vec![d, v]),
        ("mlm.b".to_string(), vec![v]),
    ]);
    for (h, &c) in head_sizes.iter().enumerate() {
        out.push((format!("head{h}.w"), vec![d, c]));
        out.push((format!("head{h}.b"), vec![c]));
    }
    out
}

fn layout(cfg: &EncoderConfig, n_heads: usize) -> Layout {
    // Mirrors the ordering of `param_shapes`.
    let mut i = 2;
    let mut pair = || {
        i += 2;
        (i - 2, i - 1)
    };
    let layers = (0..cfg.n_layers)
        .map(|_| LayerIdx {
            ln1: pair(),
            q: pair(),
            k: pair(),
            v: pair(),
            o: pair(),
            ln2: pair(),
            ff1: pair(),
            ff2: pair(),
        })
        .collect();
    let final_ln = pair();
    let mlm = pair();
    let heads = (0..n_heads).map(|_| pair()).collect();
    Layout {
        tok: 0,
        pos: 1,
        layers,
        final_ln,
        mlm,
        heads,
    }
}

/// Parameters of the encoder, its MLM head and its classification heads.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    head_sizes: Vec<usize>,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// An encoder's parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Last-layer states of packed (unpadded) sequences.
#[derive(Clone, Debug)]
pub struct Hidden {
    pub states: Var,
    /// `(first row, true length)` per input sequence.
    pub segments: Vec<(usize, usize)>,
}

impl Encoder {
    /// Random initialization; classification heads start at zero.
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        head_sizes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if head_sizes.contains(&0) {
            return Err(Error::Config("a classification head needs classes".into()));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let shapes = param_shapes(&config, head_sizes);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let data = if leaf == "gain" {
                vec![1.0; n]
            } else if name.starts_with("head") || leaf.starts_with('b') {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(rng)).collect()
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        let layout = layout(&config, head_sizes.len());
        Ok(Self {
            config,
            head_sizes: head_sizes.to_vec(),
            names,
            params,
            layout,
        })
    }

    /// Rebuilds an encoder from named tensors, checking every expected name and shape.
    pub fn from_named(
        config: EncoderConfig,
        head_sizes: &[usize],
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config, head_sizes);
        if shapes.len() != named.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, shape), (got_name, t)) in shapes.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Config(format!("parameter `{name}` is not finite")));
            }
            names.push(name);
            params.push(t);
        }
        let layout = layout(&config, head_sizes.len());
        Ok(Self {
            config,
            head_sizes: head_sizes.to_vec(),
            names,
            params,
            layout,
        })
    }

    /// Replaces the classification heads with fresh zero-initialized ones.
    pub fn with_heads(mut self, head_sizes: &[usize]) -> Result<Self> {
        if head_sizes.contains(&0) {
            return Err(Error::Config("a classification head needs classes".into()));
        }
        let keep = self.params.len() - 2 * self.head_sizes.len();
        self.params.truncate(keep);
        self.names.truncate(keep);
        for (h, &c) in head_sizes.iter().enumerate() {
            self.names.push(format!("head{h}.w"));
            self.params.push(Tensor::zeros(&[self.config.d_model, c]));
            self.names.push(format!("head{h}.b"));
            self.params.push(Tensor::zeros(&[c]));
        }
        self.head_sizes = head_sizes.to_vec();
        self.layout = layout(&self.config, head_sizes.len());
        Ok(self)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn head_sizes(&self) -> &[usize] {
        &self.head_sizes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records all parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = self.config.dropout_prob;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let n = tape.value(x).numel();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, x: Var, (w, bias): (usize, usize)) -> Result<Var> {
        let y = tape.matmul(x, b.vars[w], false)?;
        tape.add_bias(y, b.vars[bias])
    }

    /// Runs the encoder over `seqs`. Padding is dropped before the first
    /// layer, so states of real tokens never depend on it. Dropout is
    /// applied only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        seqs: &[TokenSeq],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Hidden> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            if s.ids.len() > self.config.max_len || s.true_length > s.ids.len() {
                return Err(Error::Shape(format!(
                    "sequence {i} has length {} (true {}), max_len is {}",
                    s.ids.len(),
                    s.true_length,
                    self.config.max_len
                )));
            }
            if s.true_length == 0 {
                return Err(Error::Shape(format!("sequence {i} has no [CLS] token")));
            }
            if let Some(bad) = s.tokens().iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Index(format!("token id {bad} outside the vocabulary")));
            }
            segments.push((ids.len(), s.true_length));
            ids.extend_from_slice(s.tokens());
            positions.extend(0..s.true_length);
        }
        if ids.is_empty() {
            return Err(Error::EmptyBatch("no sequences to encode".into()));
        }
        let l = &self.layout;
        let tok = tape.gather_rows(b.vars[l.tok], &ids)?;
        let pos = tape.gather_rows(b.vars[l.pos], &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = self.dropout(tape, x, &mut rng)?;
        for layer in &l.layers {
            let h = tape.layer_norm(x, b.vars[layer.ln1.0], b.vars[layer.ln1.1])?;
            let q = self.linear(tape, b, h, layer.q)?;
            let k = self.linear(tape, b, h, layer.k)?;
            let v = self.linear(tape, b, h, layer.v)?;
            let a = tape.attention(q, k, v, &segments, self.config.n_heads)?;
            let o = self.linear(tape, b, a, layer.o)?;
            let o = self.dropout(tape, o, &mut rng)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, b.vars[layer.ln2.0], b.vars[layer.ln2.1])?;
            let f = self.linear(tape, b, h, layer.ff1)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, b, f, layer.ff2)?;
            let f = self.dropout(tape, f, &mut rng)?;
            x = tape.add(x, f)?;
        }
        let states = tape.layer_norm(x, b.vars[l.final_ln.0], b.vars[l.final_ln.1])?;
        Ok(Hidden { states, segments })
    }

    /// `[N, d_model]` matrix of last-layer `[CLS]` states.
    pub fn cls(&self, tape: &mut Tape, hidden: &Hidden) -> Result<Var> {
        let starts: Vec<usize> = hidden.segments.iter().map(|(s, _)| *s).collect();
        tape.gather_rows(hidden.states, &starts)
    }

    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        b: &Bound,
        seqs: &[TokenSeq],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let hidden = self.forward(tape, b, seqs, rng)?;
        self.cls(tape, &hidden)
    }

    /// Vocabulary logits at `(sequence, position)` pairs.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape,
        b: &Bound,
        hidden: &Hidden,
        positions: &[(usize, usize)],
    ) -> Result<Var> {
        if positions.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[0, self.config.vocab_size])));
        }
        let mut rows = Vec::with_capacity(positions.len());
        for &(s, p) in positions {
            let &(start, len) = hidden
                .segments
                .get(s)
                .ok_or_else(|| Error::Index(format!("sequence {s} out of range")))?;
            if p == 0 || p >= len {
                return Err(Error::Index(format!(
                    "position {p} is not a maskable token of sequence {s} (length {len})"
                )));
            }
            rows.push(start + p);
        }
        let h = tape.gather_rows(hidden.states, &rows)?;
        self.linear(tape, b, h, self.layout.mlm)
    }

    /// One `[N, C_h]` logit matrix per classification head.
    pub fn classify(&self, tape: &mut Tape, b: &Bound, reps: Var) -> Result<Vec<Var>> {
        self.layout
            .heads
            .iter()
            .map(|&head| self.linear(tape, b, reps, head))
            .collect()
    }

    /// `[CLS]` vectors without dropout, computed in chunks.
    pub fn embed(&self, seqs: &[TokenSeq]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let reps = self.encode_batch(&mut tape, &b, chunk, None)?;
            rows.extend(tape.value(reps).to_rows());
        }
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.d_model]));
        }
        Tensor::from_rows(&rows)
    }

    /// Per-head logits without dropout; `out[h]` is `[N, C_h]`.
    pub fn predict_logits(&self, seqs: &[TokenSeq]) -> Result<Vec<Tensor>> {
        let mut per_head: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.head_sizes.len()];
        for chunk in seqs.chunks(256) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let reps = self.encode_batch(&mut tape, &b, chunk, None)?;
            let logits = self.classify(&mut tape, &b, reps)?;
            for (h, l) in logits.iter().enumerate() {
                per_head[h].extend(tape.value(*l).to_rows());
            }
        }
        per_head
            .into_iter()
            .zip(&self.head_sizes)
            .map(|(rows, &c)| {
                if rows.is_empty() {
                    Ok(Tensor::zeros(&[0, c]))
                } else {
                    Tensor::from_rows(&rows)
                }
            })
            .collect()
    }
}

/// Fixed sentence whose embedding is stored in every checkpoint.
pub const PROBE_TEXT: &str = "turn on the lights in the kitchen";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Serialized model: config, named parameters, vocabulary, label names and
/// a probe embedding used to validate loading.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub head_sizes: Vec<usize>,
    pub head_labels: Vec<Vec<String>>,
    pub vocab: Vocab,
    params: Vec<NamedTensor>,
    probe_text: String,
    probe_vector: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Encoder, vocab: &Vocab, head_labels: Vec<Vec<String>>) -> Result<Self> {
        let probe = encode(PROBE_TEXT, vocab, model.config.max_len);
        let probe_vector = model.embed(&[probe])?.into_data();
        Ok(Self {
            config: model.config.clone(),
            head_sizes: model.head_sizes.clone(),
            head_labels,
            vocab: vocab.clone(),
            params: model
                .named_params()
                .map(|(n, t)| NamedTensor {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            probe_text: PROBE_TEXT.to_string(),
            probe_vector,
        })
    }

    /// Rebuilds the model and checks that the probe embedding is reproduced within 1e-6.
    pub fn model(&self) -> Result<Encoder> {
        let named = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let model = Encoder::from_named(self.config.clone(), &self.head_sizes, named)?;
        let probe = encode(&self.probe_text, &self.vocab, model.config.max_len);
        let v = model.embed(&[probe])?;
        let max_diff = v
            .data()
            .iter()
            .zip(&self.probe_vector)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if v.numel() != self.probe_vector.len() || max_diff > 1e-6 {
            return Err(Error::Invariant(format!(
                "checkpoint probe vector mismatch (max diff {max_diff:e})"
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
