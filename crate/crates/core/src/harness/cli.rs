//! `embl` command line.
//!
//! Exit codes: 0 success, 1 contract or config failure, 2 I/O or format
//! failure, 64 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::records_to_jsonl;
use crate::error::{contract, Error, Result};

use super::checkpoint::{load_checkpoint, save_checkpoint_with, Checkpointed};
use super::config::{ExperimentConfig, InversionMode, MembershipLevel, SweepKind};
use super::io::write_atomic;
use super::pipeline::{self as pl, CorpusData};
use super::report::{build_report, write_csv, write_jsonl};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONTRACT: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "embl", about = "Train embeddings and measure what they leak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Model training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Attacks on trained models.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Defense sweeps.
    #[command(subcommand)]
    Defend(DefendCmd),
    /// Aggregate result files into plot-data CSVs.
    Report {
        #[arg(long)]
        from: PathBuf,
        /// Defaults to `<from>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Vocabulary and document split of the configured corpus.
    Build(ConfigArg),
    /// Writes the synthetic corpus to `corpus.path` and, when set, the
    /// utility set to `corpus.utility_path`.
    Synth(ConfigArg),
}

#[derive(Debug, Subcommand)]
enum TrainCmd {
    Word(ConfigArg),
    Sentence(ConfigArg),
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Relaxed,
    Sparse,
    Mlc,
    Msp,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum LevelArg {
    Word,
    Sentence,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Word,
    Attribute,
}

#[derive(Debug, Subcommand)]
enum AttackCmd {
    Invert {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Overrides `attack.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    Attribute(ConfigArg),
    Membership {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Overrides `attack.membership.level`.
        #[arg(long, value_enum)]
        level: Option<LevelArg>,
    },
}

#[derive(Debug, Subcommand)]
enum DefendCmd {
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Overrides `defense.kind`.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig> {
    match &arg.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn word_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("word.embl")
}

fn sentence_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("sentence.embl")
}

fn run_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::from_str(&cfg.embedded_json()).expect("config is JSON")
}

fn check_vocab(model: &Checkpointed, data: &CorpusData, path: &Path) -> Result<()> {
    contract!(
        model.vocab().hash() == data.vocab.hash(),
        "{} was trained on a different corpus or split than the config describes",
        path.display()
    );
    Ok(())
}

fn load_sentence(cfg: &ExperimentConfig, data: &CorpusData) -> Result<crate::sentence_encoder::SentenceEncoderModel> {
    let p = sentence_path(cfg);
    let m = load_checkpoint(&p)?;
    check_vocab(&m, data, &p)?;
    m.into_sentence()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(CorpusCmd::Synth(a)) => {
            let cfg = load_config(&a)?;
            let (corpus, utility) = pl::synth_records(&cfg)?;
            write_atomic(&cfg.corpus.path, records_to_jsonl(&corpus).as_bytes())?;
            println!("wrote {} sentences to {}", corpus.len(), cfg.corpus.path.display());
            if let Some(u) = &cfg.corpus.utility_path {
                write_atomic(u, records_to_jsonl(&utility).as_bytes())?;
                println!("wrote {} sentences to {}", utility.len(), u.display());
            }
        }
        Command::Corpus(CorpusCmd::Build(a)) => {
            let cfg = load_config(&a)?;
            let data = CorpusData::load(&cfg)?;
            write_atomic(&cfg.output_dir.join("vocab.tsv"), data.vocab.to_tsv().as_bytes())?;
            let split = serde_json::json!({
                "config_hash": cfg.hash(),
                "seed": cfg.seed,
                "vocab_hash": data.vocab.hash(),
                "train": data.train.iter().map(|d| &d.group).collect::<Vec<_>>(),
                "aux": data.aux.iter().map(|d| &d.group).collect::<Vec<_>>(),
                "targets": data.targets.iter().map(|d| &d.group).collect::<Vec<_>>(),
            });
            write_atomic(&cfg.output_dir.join("split.json"), format!("{split}\n").as_bytes())?;
            println!("vocabulary of {} words; {} training and {} held-out documents", data.vocab.len(), data.train.len(), data.heldout.len());
        }
        Command::Train(TrainCmd::Word(a)) => {
            let cfg = load_config(&a)?;
            let data = CorpusData::load(&cfg)?;
            let m = pl::train_word_model(&cfg, &data)?;
            save_checkpoint_with(&Checkpointed::Word(m), &word_path(&cfg), &run_json(&cfg))?;
            println!("wrote {}", word_path(&cfg).display());
        }
        Command::Train(TrainCmd::Sentence(a)) => {
            let cfg = load_config(&a)?;
            let data = CorpusData::load(&cfg)?;
            let m = pl::train_sentence_model(&cfg, &data)?;
            save_checkpoint_with(&Checkpointed::Sentence(m), &sentence_path(&cfg), &run_json(&cfg))?;
            println!("wrote {}", sentence_path(&cfg).display());
        }
        Command::Attack(AttackCmd::Invert { cfg: a, mode }) => {
            let mut cfg = load_config(&a)?;
            if let Some(m) = mode {
                cfg.attack.mode = match m {
                    ModeArg::Relaxed => InversionMode::Relaxed,
                    ModeArg::Sparse => InversionMode::Sparse,
                    ModeArg::Mlc => InversionMode::Mlc,
                    ModeArg::Msp => InversionMode::Msp,
                };
            }
            let data = CorpusData::load(&cfg)?;
            let model = load_sentence(&cfg, &data)?;
            let run = pl::run_inversion(&cfg, &model, &data, cfg.attack.mode)?;
            let dir = cfg.results_dir();
            let path = dir.join(format!("invert_{}.jsonl", cfg.attack.mode.as_str()));
            write_jsonl(&path, &run.rows, &cfg)?;
            if !run.pr_curve.is_empty() {
                write_csv(&dir.join("mlc_pr_curve.csv"), &run.pr_curve, &cfg)?;
            }
            println!(
                "{}: {} targets, precision {:.4} recall {:.4} f1 {:.4}",
                cfg.attack.mode.as_str(),
                run.rows.len(),
                run.mean.precision,
                run.mean.recall,
                run.mean.f1
            );
        }
        Command::Attack(AttackCmd::Attribute(a)) => {
            let cfg = load_config(&a)?;
            let data = CorpusData::load(&cfg)?;
            let model = load_sentence(&cfg, &data)?;
            let rows = pl::run_attribute(&cfg, &model, &data)?;
            write_csv(&cfg.results_dir().join("attribute.csv"), &rows, &cfg)?;
            for &n in &cfg.attack.attribute.n_aux {
                println!(
                    "n_aux {n}: probe top-5 {:.4}, textcnn top-5 {:.4}",
                    pl::mean_top5(&rows, "probe", n).unwrap_or(f64::NAN),
                    pl::mean_top5(&rows, "textcnn", n).unwrap_or(f64::NAN)
                );
            }
        }
        Command::Attack(AttackCmd::Membership { cfg: a, level }) => {
            let mut cfg = load_config(&a)?;
            if let Some(l) = level {
                cfg.attack.membership.level = match l {
                    LevelArg::Word => MembershipLevel::Word,
                    LevelArg::Sentence => MembershipLevel::Sentence,
                };
            }
            let data = CorpusData::load(&cfg)?;
            let (run, name) = match cfg.attack.membership.level {
                MembershipLevel::Word => {
                    let p = word_path(&cfg);
                    let m = load_checkpoint(&p)?;
                    check_vocab(&m, &data, &p)?;
                    (pl::run_word_membership(&cfg, &m.into_word()?, &data)?, "membership_word.csv")
                }
                MembershipLevel::Sentence => (pl::run_sentence_membership(&cfg, &load_sentence(&cfg, &data)?, &data)?, "membership_sentence.csv"),
            };
            write_csv(&cfg.results_dir().join(name), &run.rows, &cfg)?;
            for r in run.rows.iter().filter(|r| r.bucket.is_none()) {
                println!("{} / {}: advantage {:.4}", r.level, r.metric, r.advantage);
            }
        }
        Command::Defend(DefendCmd::Sweep { cfg: a, kind }) => {
            let mut cfg = load_config(&a)?;
            if let Some(k) = kind {
                cfg.defense.kind = match k {
                    KindArg::Word => SweepKind::Word,
                    KindArg::Attribute => SweepKind::Attribute,
                };
            }
            let data = CorpusData::load(&cfg)?;
            let rows = pl::run_defense_sweep(&cfg, &data, cfg.defense.kind)?;
            let name = match cfg.defense.kind {
                SweepKind::Word => "defense_word.csv",
                SweepKind::Attribute => "defense_attribute.csv",
            };
            write_csv(&cfg.results_dir().join(name), &rows, &cfg)?;
            for r in &rows {
                println!("lambda {:.3}: {} {:.4}, utility {:.4}", r.lambda, r.metric, r.attack_metric, r.utility_accuracy);
            }
        }
        Command::Report { from, out } => {
            let out = out.unwrap_or_else(|| from.join("report"));
            for p in build_report(&from, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

/// Caps rayon workers at `EMBL_THREADS` when set. Only the first call has
/// an effect.
fn init_threads() {
    if let Some(n) = std::env::var("EMBL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io_class() {
        EXIT_IO
    } else {
        EXIT_CONTRACT
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("embl: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(cli_dispatch(["embl", "frobnicate"]), EXIT_USAGE);
        assert_eq!(cli_dispatch(["embl"]), EXIT_USAGE);
        assert_eq!(cli_dispatch(["embl", "attack", "invert", "--mode", "nope"]), EXIT_USAGE);
        assert_eq!(cli_dispatch(["embl", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::Contract("x".into())), EXIT_CONTRACT);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(exit_code(&Error::CorruptCheckpoint("x".into())), EXIT_IO);
        assert_eq!(cli_dispatch(["embl", "train", "word", "--config", "/nonexistent/c.toml"]), EXIT_IO);
    }
}
