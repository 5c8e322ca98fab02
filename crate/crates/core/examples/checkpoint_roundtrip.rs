//! Save both model kinds in the binary checkpoint format and load them back.
//!
//!     cargo run --release --example checkpoint_roundtrip

use embl::harness::config::ExperimentConfig;
use embl::harness::pipeline::{self as pl, CorpusData};
use embl::harness::{load_checkpoint, save_checkpoint, Checkpointed};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    cfg.word.sgns.epochs = 1;
    cfg.sentence.epochs = 1;
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    let dir = tempfile::tempdir()?;

    let word = pl::train_word_model(&cfg, &data)?;
    let path = dir.path().join("word.embl");
    save_checkpoint(&Checkpointed::Word(word.clone()), &path)?;
    let back = load_checkpoint(&path)?.into_word()?;
    let drift = word.v.max_abs_diff(&back.v);
    println!("word: {} bytes, max |diff| {drift:.2e} (f32 storage)", std::fs::metadata(&path)?.len());

    let sent = pl::train_sentence_model(&cfg, &data)?;
    let path = dir.path().join("sentence.embl");
    save_checkpoint(&Checkpointed::Sentence(sent.clone()), &path)?;
    let back = load_checkpoint(&path)?.into_sentence()?;
    let x = &pl::inversion_targets(&cfg, &data)[0];
    let (a, b) = (sent.encode(x)?, back.encode(x)?);
    let gap = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    println!("sentence: {} bytes, same vocab: {}, embedding gap {gap:.2e}", std::fs::metadata(&path)?.len(), back.vocab.hash() == sent.vocab.hash());

    let mut bytes = std::fs::read(&path)?;
    bytes[0] ^= 0xff;
    println!("flipped magic byte: {}", embl::harness::decode_checkpoint(&bytes).unwrap_err());
    Ok(())
}
