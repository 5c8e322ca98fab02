//! Adversarial training with gradient reversal. One sweep per defense,
//! reporting the attack metric and utility accuracy at each weight.
//!
//!     cargo run --release --example adversarial_defense

use embl::harness::config::{ExperimentConfig, SweepKind};
use embl::harness::pipeline::{self as pl, CorpusData};

fn main() -> embl::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    for kind in [SweepKind::Word, SweepKind::Attribute] {
        let t = std::time::Instant::now();
        let rows = pl::run_defense_sweep(&cfg, &data, kind)?;
        println!("{kind:?} sweep [{:.1}s]", t.elapsed().as_secs_f64());
        for r in &rows {
            println!("  lambda {:>5.2}  {} {:.3}  utility {:.3}", r.lambda, r.metric, r.attack_metric, r.utility_accuracy);
        }
    }
    Ok(())
}
