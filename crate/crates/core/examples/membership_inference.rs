//! Membership inference at the word-window, sentence-pair and document
//! level, with advantage per frequency bucket for words.
//!
//!     cargo run --release --example membership_inference

use embl::harness::config::ExperimentConfig;
use embl::harness::pipeline::{self as pl, CorpusData};

fn main() -> embl::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;

    let words = pl::train_word_model(&cfg, &data)?;
    let run = pl::run_word_membership(&cfg, &words, &data)?;
    for r in &run.rows {
        let b = r.bucket.map_or("all".to_string(), |b| format!("bucket {b}"));
        println!("word {b:>9}: adv {:.3} (tpr {:.3} fpr {:.3}, {}+{})", r.advantage, r.tpr, r.fpr, r.n_member, r.n_nonmember);
    }
    for (level, metric, rho) in &run.spearman {
        if let Some(rho) = rho {
            println!("{level} / {metric}: spearman(bucket, advantage) = {rho:.3}");
        }
    }

    let model = pl::train_sentence_model(&cfg, &data)?;
    let run = pl::run_sentence_membership(&cfg, &model, &data)?;
    for r in run.rows.iter().filter(|r| r.bucket.is_none()) {
        println!("{} / {}: adv {:.3}", r.level, r.metric, r.advantage);
    }
    Ok(())
}
