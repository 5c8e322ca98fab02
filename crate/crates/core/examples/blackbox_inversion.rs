//! Black-box inversion from auxiliary (sentence, embedding) pairs: the
//! multi-label classifier and the multi-set predictor.
//!
//!     cargo run --release --example blackbox_inversion

use embl::harness::config::{ExperimentConfig, InversionMode};
use embl::harness::pipeline::{self as pl, CorpusData};

fn main() -> embl::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    let model = pl::train_sentence_model(&cfg, &data)?;
    println!("{} aux documents, {} target documents", data.aux.len(), data.targets.len());

    for mode in [InversionMode::Mlc, InversionMode::Msp] {
        let t = std::time::Instant::now();
        let run = pl::run_inversion(&cfg, &model, &data, mode)?;
        let m = run.mean;
        println!("{}: P={:.3} R={:.3} F1={:.3} [{:.1}s]", mode.as_str(), m.precision, m.recall, m.f1, t.elapsed().as_secs_f64());
        if !run.pr_curve.is_empty() {
            for p in run.pr_curve.iter().step_by(run.pr_curve.len().div_ceil(5)) {
                println!("  threshold {:.2}: P={:.3} R={:.3}", p.threshold, p.precision, p.recall);
            }
        }
    }
    Ok(())
}
