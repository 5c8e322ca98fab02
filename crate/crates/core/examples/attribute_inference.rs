//! Few-shot authorship inference: a linear probe on frozen sentence
//! embeddings against a TextCNN trained from scratch on the same few
//! labelled sentences.
//!
//!     cargo run --release --example attribute_inference

use embl::harness::config::ExperimentConfig;
use embl::harness::pipeline::{self as pl, CorpusData};

fn main() -> embl::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?.resolved();
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    let model = pl::train_sentence_model(&cfg, &data)?;
    let rows = pl::run_attribute(&cfg, &model, &data)?;
    let a = &cfg.attack.attribute;
    println!("{} classes, {} targets per class, {} trials", a.classes, a.n_target, a.trials);
    for &n in &a.n_aux {
        let probe = pl::mean_top5(&rows, "probe", n).unwrap_or(f64::NAN);
        let cnn = pl::mean_top5(&rows, "textcnn", n).unwrap_or(f64::NAN);
        println!("N_s={n:>3}: top-5 probe {probe:.3}  textcnn {cnn:.3}");
    }
    Ok(())
}
