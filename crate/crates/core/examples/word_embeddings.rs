//! Train SGNS and the co-occurrence factorisation on a synthetic corpus and
//! print nearest neighbours of a few signature words.
//!
//!     cargo run --release --example word_embeddings

use embl::corpus::Split;
use embl::harness::config::ExperimentConfig;
use embl::harness::pipeline::{self as pl, CorpusData};
use embl::word_embedding::{cosine_similarity, train_cooccurrence, train_sgns, WordEmbeddingModel};

fn neighbours(m: &WordEmbeddingModel, id: usize, k: usize) -> Vec<(String, f64)> {
    let mut s: Vec<(usize, f64)> = (1..m.vocab.len())
        .filter(|&j| j != id)
        .map(|j| (j, cosine_similarity(m.vector(id), m.vector(j)).unwrap_or(0.0)))
        .collect();
    s.sort_by(|a, b| b.1.total_cmp(&a.1));
    s.into_iter().take(k).map(|(j, c)| (m.vocab.word(j).to_string(), c)).collect()
}

fn main() -> embl::Result<()> {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/small.toml"))?;
    let data = CorpusData::from_synth(&pl::synth_from_config(&cfg)?, &cfg)?;
    let windows = data.windows(&data.train, cfg.word.sgns.radius, Split::Train)?;
    println!("{} words, {} training windows", data.vocab.len(), windows.len());

    let sgns = train_sgns(&windows, &data.vocab, &cfg.word.sgns)?;
    let cooc = train_cooccurrence(&windows, &data.vocab, &cfg.word.cooc)?;

    // the least frequent in-vocabulary words are mostly author signatures
    let mut ids: Vec<usize> = (1..data.vocab.len()).collect();
    ids.sort_by_key(|&i| std::cmp::Reverse(data.vocab.count(i)));
    for &id in ids.iter().take(3).chain(ids.iter().rev().take(2)) {
        println!("{} (count {})", data.vocab.word(id), data.vocab.count(id));
        for (name, m) in [("sgns", &sgns), ("cooc", &cooc)] {
            let nn: Vec<String> = neighbours(m, id, 4).into_iter().map(|(w, c)| format!("{w} {c:.2}")).collect();
            println!("  {name}: {}", nn.join(", "));
        }
    }
    Ok(())
}
