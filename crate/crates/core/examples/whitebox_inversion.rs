//! White-box inversion: relaxed optimisation over word distributions, and
//! sparse non-negative decomposition over the word matrix. Also shows one
//! target decoded word by word.
//!
//!     cargo run --release --example whitebox_inversion

use embl::harness::config::{ExperimentConfig, InversionMode};
use embl::harness::pipeline::{self as pl, CorpusData};
use embl::inversion::{invert_sparse_sentence, word_set};

fn main() -> embl::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    let model = pl::train_sentence_model(&cfg, &data)?;

    let target = &pl::inversion_targets(&cfg, &data)[0];
    let out = invert_sparse_sentence(&model.encoder, &model.encode(target)?, None, &cfg.attack.sparse)?;
    let show = |ids: &mut dyn Iterator<Item = usize>| ids.map(|i| data.vocab.word(i).to_string()).collect::<Vec<_>>().join(" ");
    println!("truth:     {}", show(&mut word_set(target).into_iter()));
    println!("recovered: {}", show(&mut out.prediction.words.iter().copied()));

    for mode in [InversionMode::Relaxed, InversionMode::Sparse] {
        let t = std::time::Instant::now();
        let run = pl::run_inversion(&cfg, &model, &data, mode)?;
        let m = run.mean;
        println!(
            "{}: {} targets P={:.3} R={:.3} F1={:.3} [{:.1}s]",
            mode.as_str(),
            run.rows.len(),
            m.precision,
            m.recall,
            m.f1,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
