//! Contrastive dual encoder on adjacent-sentence pairs. Prints the mean
//! similarity of true neighbours against shuffled ones, for both
//! architectures.
//!
//!     cargo run --release --example sentence_encoder

use embl::corpus::Split;
use embl::harness::config::ExperimentConfig;
use embl::harness::pipeline::{self as pl, CorpusData};
use embl::numerics::dot;
use embl::sentence_encoder::{train_dual_encoder, Arch};

fn main() -> embl::Result<()> {
    let mut cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    let train = data.pairs(&data.train, Split::Train);
    let held = data.pairs(&data.heldout, Split::Heldout);
    println!("{} training pairs, {} held-out pairs", train.len(), held.len());

    for arch in [Arch::MeanPool, Arch::Recurrent] {
        cfg.sentence.arch = arch;
        cfg.sentence.hidden = 32;
        let t = std::time::Instant::now();
        let model = train_dual_encoder(&train, &data.vocab, &cfg.sentence)?;
        let (mut pos, mut neg) = (0.0, 0.0);
        for (i, p) in held.iter().enumerate() {
            let a = model.encode(&p.first)?;
            pos += dot(&a, &model.encode(&p.second)?);
            neg += dot(&a, &model.encode(&held[(i + 17) % held.len()].second)?);
        }
        let n = held.len() as f64;
        println!("{arch:?}: d={} neighbour {:.3} vs shuffled {:.3} [{:.1}s]", model.d(), pos / n, neg / n, t.elapsed().as_secs_f64());
    }
    Ok(())
}
