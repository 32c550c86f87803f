//! Command-line interface: `pretrain`, `finetune`, `evaluate`, `synth`,
//! `wer`, `ablate` and `gen-toy`.
//!
//! Every training subcommand reads an optional flat TOML config and applies
//! `--set key=value` overrides on top. Outputs go to `--out`, which falls
//! back to `$ROBUST_SLU_OUT` and then to `runs/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    edit_distance, generate_toy, load_pairs, save_pairs, LabelSpace, NoiseChannel, NoiseConfig, PairedExample,
    ToyConfig, WerBuckets, FILLERS,
};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::pipeline::{ablation, build_vocab, init_model, run, SeedSummary};
use crate::textproc::tokenize;
use crate::trainer::{finetune, parse_override, pretrain, TrainingConfig};

#[derive(Debug, Parser)]
#[command(name = "robust-slu", version, about = "Noise-robust utterance classification from paired clean/ASR text")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML file of settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = "ROBUST_SLU_OUT", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive + MLM pre-training on paired transcripts.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Paired training data (overrides `train` in the config).
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Fine-tune classification heads, optionally from a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        /// Checkpoint to start from; a fresh encoder is used when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a fine-tuned checkpoint on the ASR side of a test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// `google`, `wav2vec` or `quartile`.
        #[arg(long)]
        buckets: Option<String>,
    },
    /// Corrupt clean text with the synthetic recognition-error channel.
    Synth {
        /// Plain text (one utterance per line) or `.jsonl` records.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        target_wer: f64,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra words (whitespace separated) for the substitution lexicon.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Word error rate between two line-aligned files.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Print one rate per line instead of the corpus rate.
        #[arg(long)]
        per_line: bool,
    },
    /// Pre-train, fine-tune and evaluate with one loss term removed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of full, no_mlm, no_c, no_hard_soft, no_d_soft, no_soft.
        #[arg(long)]
        name: String,
        /// Comma-separated seeds; metrics are averaged over them.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Write a templated toy corpus with synthetic ASR hypotheses.
    GenToy {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        target_wer: f64,
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
        /// Single intent labels instead of scenario/action pairs.
        #[arg(long)]
        single_label: bool,
        #[arg(long, default_value = "toy")]
        id_prefix: String,
    },
}

/// Settings that name data rather than training behaviour.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub buckets: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

const DATA_KEYS: [&str; 4] = ["train", "test", "buckets", "checkpoint"];

/// Loads the config file (if any), applies overrides and splits the flat
/// table into data settings and training settings.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<(DataConfig, TrainingConfig)> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let (k, v) = parse_override(item)?;
        table.insert(k, v);
    }
    let mut data = toml::Table::new();
    for key in DATA_KEYS {
        if let Some(v) = table.remove(key) {
            data.insert(key.to_string(), v);
        }
    }
    let data: DataConfig = data.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let training: TrainingConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    training.validate()?;
    Ok((data, training))
}

fn require(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("no {what} given (flag or config key)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, &out)
}

fn write_resolved(dir: &Path, data: &DataConfig, cfg: &TrainingConfig) -> Result<()> {
    let mut text = toml::to_string(data).map_err(|e| Error::Config(e.to_string()))?;
    text.push_str(&cfg.to_toml_string());
    write_file(&dir.join("config.toml"), &text)
}

fn buckets_for(name: Option<&str>, examples: &[PairedExample]) -> Result<WerBuckets> {
    let wers: Vec<f64> = examples.iter().map(|e| e.wer).collect();
    WerBuckets::by_name(name.unwrap_or("google"), &wers)
}

fn cmd_pretrain(common: Common, train: Option<PathBuf>) -> Result<()> {
    let (mut data, cfg) = resolve_config(common.config.as_deref(), &common.overrides)?;
    data.train = train.or(data.train);
    let pairs = load_pairs(&require(data.train.clone(), "training data")?)?;
    let vocab = build_vocab(&pairs, cfg.min_freq)?;
    let model = init_model(&vocab, &cfg)?;
    let out = pretrain(model, &vocab, &pairs, &cfg)?;
    create_dir(&common.out)?;
    write_resolved(&common.out, &data, &cfg)?;
    write_jsonl(&common.out.join("pretrain_log.jsonl"), &out.log)?;
    vocab.save(&common.out.join("vocab.tsv"))?;
    let path = common.out.join("pretrain.ckpt.json");
    Checkpoint::new(&out.model, &vocab, Vec::new())?.save(&path)?;
    if let Some(last) = out.log.last() {
        println!("step {} l_c {:.4} l_mlm {:.4} l_pt {:.4}", last.step, last.l_c, last.l_mlm, last.l_pt);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_finetune(common: Common, train: Option<PathBuf>, init: Option<PathBuf>) -> Result<()> {
    let (mut data, cfg) = resolve_config(common.config.as_deref(), &common.overrides)?;
    data.train = train.or(data.train);
    data.checkpoint = init.or(data.checkpoint);
    let examples = load_pairs(&require(data.train.clone(), "training data")?)?;
    let space = LabelSpace::from_examples(&examples)?;
    let (model, vocab) = match &data.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            (ckpt.model()?, ckpt.vocab)
        }
        None => {
            let vocab = build_vocab(&examples, cfg.min_freq)?;
            (init_model(&vocab, &cfg)?, vocab)
        }
    };
    let model = model.with_heads(&space.head_sizes())?;
    let out = finetune(model, &vocab, &space, &examples, &cfg)?;
    create_dir(&common.out)?;
    write_resolved(&common.out, &data, &cfg)?;
    write_jsonl(&common.out.join("finetune_log.jsonl"), &out.history)?;
    let path = common.out.join("model.ckpt.json");
    Checkpoint::new(&out.model, &vocab, space.heads.clone())?.save(&path)?;
    for r in &out.history {
        println!(
            "epoch {} l_ce {:.4} l_ft {:.4} val {}",
            r.epoch,
            r.l_ce,
            r.l_ft,
            r.val_metric.map_or("-".into(), |m| format!("{m:.4}"))
        );
    }
    println!("best epoch {}; wrote {}", out.best_epoch, path.display());
    Ok(())
}

fn cmd_evaluate(common: Common, model: Option<PathBuf>, test: Option<PathBuf>, buckets: Option<String>) -> Result<()> {
    let (mut data, _) = resolve_config(common.config.as_deref(), &common.overrides)?;
    data.checkpoint = model.or(data.checkpoint);
    data.test = test.or(data.test);
    data.buckets = buckets.or(data.buckets);
    let ckpt = Checkpoint::load(&require(data.checkpoint.clone(), "model checkpoint")?)?;
    if ckpt.head_labels.is_empty() {
        return Err(Error::Config("checkpoint has no classification heads; fine-tune it first".into()));
    }
    let examples = load_pairs(&require(data.test.clone(), "test data")?)?;
    let space = LabelSpace {
        heads: ckpt.head_labels.clone(),
    };
    let b = buckets_for(data.buckets.as_deref(), &examples)?;
    let report = evaluate("evaluate", &ckpt.model()?, &ckpt.vocab, &space, &examples, &b)?;
    create_dir(&common.out)?;
    write_file(&common.out.join("report.csv"), &report.to_csv())?;
    write_file(&common.out.join("report.json"), &report.to_json())?;
    print!("{}", report.to_table());
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn cmd_synth(
    input: PathBuf,
    output: PathBuf,
    target_wer: f64,
    spread: f64,
    seed: u64,
    lexicon: Option<PathBuf>,
) -> Result<()> {
    let cfg = NoiseConfig {
        target_wer_median: target_wer,
        wer_spread: spread,
        seed,
        ..NoiseConfig::default()
    };
    let jsonl = input.extension().is_some_and(|e| e == "jsonl");
    let records = if jsonl { Some(load_pairs(&input)?) } else { None };
    let lines = match &records {
        Some(r) => r.iter().map(|e| e.clean.clone()).collect(),
        None => read_lines(&input)?,
    };
    let mut words: Vec<String> = lines.iter().flat_map(|l| tokenize(l)).collect();
    words.extend(FILLERS.iter().map(|s| s.to_string()));
    if let Some(p) = lexicon {
        words.extend(read_lines(&p)?.iter().flat_map(|l| tokenize(l)));
    }
    let channel = NoiseChannel::new(cfg, words)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match records {
        Some(recs) => {
            let noisy = recs
                .into_iter()
                .map(|e| {
                    let asr = channel.apply(&e.clean, &mut rng);
                    PairedExample::new(e.id, e.clean, asr, e.label)
                })
                .collect::<Result<Vec<_>>>()?;
            save_pairs(&output, &noisy)?;
        }
        None => {
            let mut out = String::new();
            for l in &lines {
                out.push_str(&channel.apply(l, &mut rng));
                out.push('\n');
            }
            write_file(&output, &out)?;
        }
    }
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_wer(reference: PathBuf, hyp: PathBuf, per_line: bool) -> Result<()> {
    let r = read_lines(&reference)?;
    let h = read_lines(&hyp)?;
    if r.len() != h.len() {
        return Err(Error::Shape(format!("{} reference lines but {} hypothesis lines", r.len(), h.len())));
    }
    let mut edits = 0;
    let mut words = 0;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, (a, b)) in r.iter().zip(&h).enumerate() {
        let (ta, tb) = (tokenize(a), tokenize(b));
        let e = edit_distance(&ta, &tb);
        if per_line {
            if ta.is_empty() {
                return Err(Error::UndefinedWer(format!("reference line {} is empty", i + 1)));
            }
            let _ = writeln!(out, "{:?}", e as f64 / ta.len() as f64);
        }
        edits += e;
        words += ta.len();
    }
    if !per_line {
        if words == 0 {
            return Err(Error::UndefinedWer("reference file has no words".into()));
        }
        let _ = writeln!(out, "{:?}", edits as f64 / words as f64);
    }
    Ok(())
}

fn cmd_ablate(
    common: Common,
    name: String,
    seeds: Option<Vec<u64>>,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
) -> Result<()> {
    let (mut data, base) = resolve_config(common.config.as_deref(), &common.overrides)?;
    let cfg = ablation(&name, &base)?;
    data.train = train.or(data.train);
    data.test = test.or(data.test);
    let train = load_pairs(&require(data.train.clone(), "training data")?)?;
    let test = load_pairs(&require(data.test.clone(), "test data")?)?;
    let b = buckets_for(data.buckets.as_deref(), &test)?;
    let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
    let dir = common.out.join(&name);
    create_dir(&dir)?;
    write_resolved(&dir, &data, &cfg)?;
    let mut reports = Vec::new();
    for &seed in &seeds {
        let run_cfg = TrainingConfig { seed, ..cfg.clone() };
        let out = run(&name, &train, &test, &run_cfg, true, &b)?;
        let sub = dir.join(format!("seed{seed}"));
        create_dir(&sub)?;
        write_jsonl(&sub.join("pretrain_log.jsonl"), &out.pretrain_log)?;
        write_jsonl(&sub.join("finetune_log.jsonl"), &out.finetune_log)?;
        write_file(&sub.join("report.csv"), &out.report.to_csv())?;
        write_file(&sub.join("report.json"), &out.report.to_json())?;
        out.checkpoint.save(&sub.join("model.ckpt.json"))?;
        print!("seed {seed}\n{}", out.report.to_table());
        reports.push(out.report);
    }
    let summary = SeedSummary::from_reports(&name, &reports)?;
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    print!("{}", summary.to_table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_toy(
    output: PathBuf,
    n: usize,
    seed: u64,
    target_wer: f64,
    label_noise: f64,
    single_label: bool,
    id_prefix: String,
) -> Result<()> {
    let cfg = ToyConfig {
        n_examples: n,
        label_noise,
        joint_labels: !single_label,
        noise: NoiseConfig {
            target_wer_median: target_wer,
            seed,
            ..NoiseConfig::default()
        },
        seed,
        id_prefix,
    };
    let ex = generate_toy(&cfg)?;
    save_pairs(&output, &ex)?;
    println!("wrote {} examples to {}", ex.len(), output.display());
    Ok(())
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, train } => cmd_pretrain(common, train),
        Command::Finetune { common, train, init } => cmd_finetune(common, train, init),
        Command::Evaluate {
            common,
            model,
            test,
            buckets,
        } => cmd_evaluate(common, model, test, buckets),
        Command::Synth {
            input,
            output,
            target_wer,
            spread,
            seed,
            lexicon,
        } => cmd_synth(input, output, target_wer, spread, seed, lexicon),
        Command::Wer {
            reference,
            hyp,
            per_line,
        } => cmd_wer(reference, hyp, per_line),
        Command::Ablate {
            common,
            name,
            seeds,
            train,
            test,
        } => cmd_ablate(common, name, seeds, train, test),
        Command::GenToy {
            output,
            n,
            seed,
            target_wer,
            label_noise,
            single_label,
            id_prefix,
        } => cmd_gen_toy(output, n, seed, target_wer, label_noise, single_label, id_prefix),
    }
}

/// Parses `args` and runs; returns the process exit code (2 for usage
/// errors, 1 for everything else that fails).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ABLATIONS;

    #[test]
    fn known_names_parse() {
        for name in ABLATIONS {
            let cli = Cli::try_parse_from(["robust-slu", "ablate", "--name", name, "--seeds", "1,2,3"]).unwrap();
            match cli.command {
                Command::Ablate { seeds, .. } => assert_eq!(seeds, Some(vec![1, 2, 3])),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["robust-slu", "frobnicate"]), 2);
        assert_eq!(main_with_args(["robust-slu", "wer", "--bogus"]), 2);
    }

    #[test]
    fn io_errors_exit_1() {
        assert_eq!(
            main_with_args(["robust-slu", "wer", "--ref", "/nonexistent/a", "--hyp", "/nonexistent/b"]),
            1
        );
    }

    #[test]
    fn config_split_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "train = \"t.jsonl\"\nbuckets = \"wav2vec\"\nlr = 0.01\nd_model = 16\n").unwrap();
        let (data, cfg) = resolve_config(Some(&p), &["lr=0.02".into(), "test=x.jsonl".into()]).unwrap();
        assert_eq!(data.train, Some(PathBuf::from("t.jsonl")));
        assert_eq!(data.test, Some(PathBuf::from("x.jsonl")));
        assert_eq!(data.buckets.as_deref(), Some("wav2vec"));
        assert_eq!(cfg.lr, 0.02);
        assert_eq!(cfg.d_model, 16);
        assert!(resolve_config(Some(&p), &["nonsense=1".into()]).is_err());
        assert!(resolve_config(None, &["pretrain_batch=1".into()]).is_err());
    }
}
