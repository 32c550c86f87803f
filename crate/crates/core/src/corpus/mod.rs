//! Paired clean/ASR data: loading, word error rate, a synthetic noise
//! channel, WER buckets and a templated toy corpus.

mod buckets;
mod noise;
mod toy;
mod wer;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use buckets::{bucketize, Bucket, WerBuckets};
pub use noise::{NoiseChannel, NoiseConfig, FILLERS};
pub use toy::{generate_toy, toy_lexicon, ToyConfig, TOY_INTENTS};
pub use wer::{edit_distance, wer};

/// A single intent class, or a (scenario, action) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Intent(String),
    Slurp { scenario: String, action: String },
}

impl Label {
    /// Component names, one per classification head.
    pub fn parts(&self) -> Vec<&str> {
        match self {
            Label::Intent(l) => vec![l],
            Label::Slurp { scenario, action } => vec![scenario, action],
        }
    }
}

/// A clean transcript with its ASR hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub clean: String,
    pub asr: String,
    pub label: Label,
    /// `wer(clean, asr)`.
    pub wer: f64,
}

impl PairedExample {
    pub fn new(id: impl Into<String>, clean: impl Into<String>, asr: impl Into<String>, label: Label) -> Result<Self> {
        let clean = clean.into();
        let asr = asr.into();
        let wer = wer(&clean, &asr)?;
        Ok(Self {
            id: id.into(),
            clean,
            asr,
            label,
            wer,
        })
    }
}

/// On-disk record: one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    clean: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    asr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wer: Option<f64>,
}

fn parse_line(line: &str) -> std::result::Result<PairedExample, String> {
    let r: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let label = match (r.scenario, r.action, r.label) {
        (Some(scenario), Some(action), _) => Label::Slurp { scenario, action },
        (None, None, Some(l)) => Label::Intent(l),
        _ => return Err("record needs either `label` or both `scenario` and `action`".into()),
    };
    let asr = r.asr.unwrap_or_else(|| r.clean.clone());
    PairedExample::new(r.id, r.clean, asr, label).map_err(|e| e.to_string())
}

/// Reads line-delimited JSON records. Blank lines are skipped; the `wer`
/// field is always recomputed. Errors cite the 1-based line number.
pub fn load_pairs(path: &Path) -> Result<Vec<PairedExample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        if let Some(first) = out.first() {
            let first: &PairedExample = first;
            if std::mem::discriminant(&first.label) != std::mem::discriminant(&ex.label) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "mixes single-label and scenario/action records".into(),
                });
            }
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn save_pairs(path: &Path, examples: &[PairedExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let (scenario, action, label) = match &ex.label {
            Label::Intent(l) => (None, None, Some(l.clone())),
            Label::Slurp { scenario, action } => (Some(scenario.clone()), Some(action.clone()), None),
        };
        let rec = Record {
            id: ex.id.clone(),
            clean: ex.clean.clone(),
            asr: Some(ex.asr.clone()),
            scenario,
            action,
            label,
            wer: Some(ex.wer),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Class names per head, sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub heads: Vec<Vec<String>>,
}

impl LabelSpace {
    pub fn from_examples(examples: &[PairedExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::EmptyBatch("no examples to collect labels from".into()))?;
        let n_heads = first.label.parts().len();
        let mut sets = vec![BTreeSet::new(); n_heads];
        for ex in examples {
            let parts = ex.label.parts();
            if parts.len() != n_heads {
                return Err(Error::Config(format!("example {} has a different label shape", ex.id)));
            }
            for (s, p) in sets.iter_mut().zip(parts) {
                s.insert(p.to_string());
            }
        }
        Ok(Self {
            heads: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(Vec::len).collect()
    }

    /// Class index per head.
    pub fn indices(&self, label: &Label) -> Result<Vec<usize>> {
        let parts = label.parts();
        if parts.len() != self.heads.len() {
            return Err(Error::UnknownLabel(format!("{label:?} does not fit {} heads", self.heads.len())));
        }
        parts
            .iter()
            .zip(&self.heads)
            .map(|(p, names)| {
                names
                    .binary_search_by(|n| n.as_str().cmp(p))
                    .map_err(|_| Error::UnknownLabel(format!("{p:?}")))
            })
            .collect()
    }

    /// A single integer identifying the full label across all heads.
    pub fn joint_key(&self, indices: &[usize]) -> usize {
        indices
            .iter()
            .zip(&self.heads)
            .fold(0, |acc, (i, names)| acc * names.len() + i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_no_pairs() {
        let f = write("");
        assert!(load_pairs(f.path()).unwrap().is_empty());
    }

    #[test]
    fn parses_and_recomputes_wer() {
        let f = write(
            r#"{"id":"1","clean":"turn on the light","asr":"turn of the light","label":"lights_on","wer":0.9}
{"id":"2","clean":"play music","label":"play"}
"#,
        );
        let p = load_pairs(f.path()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].wer, 0.25);
        assert_eq!(p[1].asr, "play music");
        assert_eq!(p[1].wer, 0.0);
        assert_eq!(p[1].label, Label::Intent("play".into()));
    }

    #[test]
    fn errors_cite_line_numbers() {
        let f = write("{\"id\":\"1\",\"clean\":\"a\",\"label\":\"x\"}\n\nnot json\n");
        match load_pairs(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = write("{\"id\":\"1\",\"clean\":\"a\",\"scenario\":\"x\"}\n");
        assert!(matches!(load_pairs(f.path()), Err(Error::Parse { line: 1, .. })));
        let f = write("{\"id\":\"1\",\"clean\":\"  \",\"label\":\"x\"}\n");
        assert!(matches!(load_pairs(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn round_trips_through_files() {
        let ex = vec![
            PairedExample::new(
                "a",
                "wake me at seven",
                "wake me at heaven",
                Label::Slurp {
                    scenario: "alarm".into(),
                    action: "set".into(),
                },
            )
            .unwrap(),
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_pairs(f.path(), &ex).unwrap();
        assert_eq!(load_pairs(f.path()).unwrap(), ex);
    }

    #[test]
    fn label_space_indices() {
        let mk = |s: &str, a: &str| {
            PairedExample::new(
                "x",
                "w",
                "w",
                Label::Slurp {
                    scenario: s.into(),
                    action: a.into(),
                },
            )
            .unwrap()
        };
        let space = LabelSpace::from_examples(&[mk("iot", "on"), mk("alarm", "set"), mk("iot", "off")]).unwrap();
        assert_eq!(space.head_sizes(), vec![2, 3]);
        let idx = space
            .indices(&Label::Slurp {
                scenario: "iot".into(),
                action: "set".into(),
            })
            .unwrap();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(space.joint_key(&idx), 5);
        assert!(matches!(
            space.indices(&Label::Intent("iot".into())),
            Err(Error::UnknownLabel(_))
        ));
        assert!(matches!(
            space.indices(&Label::Slurp {
                scenario: "music".into(),
                action: "on".into()
            }),
            Err(Error::UnknownLabel(_))
        ));
    }
}
