//! Synthetic library of books: authors with signature vocabulary, topics
//! with their own vocabulary, book-specific names and Zipf filler.

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use serde::{Deserialize, Serialize};

use crate::corpus::Record;
use crate::error::{contract, Error, Result};
use crate::numerics::rng::{stream, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub authors: usize,
    pub books_per_author: usize,
    pub sentences_per_book: usize,
    pub topics: usize,
    pub filler_words: usize,
    pub zipf_exponent: f64,
    pub signature_words: usize,
    pub p_signature: f64,
    pub topic_words: usize,
    pub p_topic: f64,
    pub names_per_book: usize,
    pub p_name: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Books in the separate topic-labelled utility set.
    pub utility_books: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            authors: 40,
            books_per_author: 8,
            sentences_per_book: 25,
            topics: 6,
            filler_words: 6000,
            zipf_exponent: 1.0,
            signature_words: 12,
            p_signature: 0.12,
            topic_words: 25,
            p_topic: 0.12,
            names_per_book: 3,
            p_name: 0.04,
            min_len: 5,
            max_len: 10,
            utility_books: 60,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Injective id -> pronounceable lowercase word.
pub fn synth_word(id: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let syl = |k: usize, out: &mut String| {
        out.push(CONSONANTS[k / VOWELS.len()] as char);
        out.push(VOWELS[k % VOWELS.len()] as char);
    };
    // two syllables for the first n^2 ids, then three, then four
    let mut s = String::new();
    let (mut rest, digits) = if id < n * n {
        (id, 2)
    } else if id < n * n + n * n * n {
        (id - n * n, 3)
    } else {
        (id - n * n - n * n * n, 4)
    };
    let mut parts = Vec::with_capacity(digits);
    for _ in 0..digits {
        parts.push(rest % n);
        rest /= n;
    }
    for k in parts.into_iter().rev() {
        syl(k, &mut s);
    }
    s
}

struct World {
    filler: Vec<usize>,
    filler_dist: WeightedAliasIndex<f64>,
    signature: Vec<Vec<usize>>,
    topic: Vec<Vec<usize>>,
    next_id: usize,
}

impl World {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        let mut next = 0;
        let mut take = |n: usize| {
            let v: Vec<usize> = (next..next + n).collect();
            next += n;
            v
        };
        let filler = take(cfg.filler_words);
        let signature = (0..cfg.authors).map(|_| take(cfg.signature_words)).collect();
        let topic = (0..cfg.topics).map(|_| take(cfg.topic_words)).collect();
        let weights: Vec<f64> = (0..cfg.filler_words).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect();
        let filler_dist = WeightedAliasIndex::new(weights).map_err(|e| Error::Config(format!("filler distribution: {e}")))?;
        Ok(Self {
            filler,
            filler_dist,
            signature,
            topic,
            next_id: next,
        })
    }

    fn fresh_names(&mut self, n: usize) -> Vec<usize> {
        let v = (self.next_id..self.next_id + n).collect();
        self.next_id += n;
        v
    }

    fn sentence(&self, cfg: &SynthConfig, author: usize, topic: usize, names: &[usize], rng: &mut impl Rng) -> String {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.random();
            let id = if u < cfg.p_signature && !self.signature[author].is_empty() {
                self.signature[author][rng.random_range(0..self.signature[author].len())]
            } else if u < cfg.p_signature + cfg.p_topic && !self.topic[topic].is_empty() {
                self.topic[topic][rng.random_range(0..self.topic[topic].len())]
            } else if u < cfg.p_signature + cfg.p_topic + cfg.p_name && !names.is_empty() {
                names[rng.random_range(0..names.len())]
            } else {
                self.filler[self.filler_dist.sample(rng)]
            };
            words.push(synth_word(id));
        }
        words.join(" ")
    }
}

/// A generated corpus and its utility set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// `group` is the book, `label` the author.
    pub corpus: Vec<Record>,
    /// `group` is the book, `label` the topic.
    pub utility: Vec<Record>,
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    contract!(cfg.authors > 0 && cfg.topics > 0 && cfg.filler_words > 0, "synthetic corpus needs authors, topics and filler words");
    contract!(cfg.min_len >= 1 && cfg.min_len <= cfg.max_len, "synthetic sentence lengths must satisfy 1 <= min_len <= max_len");
    contract!(cfg.p_signature + cfg.p_topic + cfg.p_name <= 1.0, "token category probabilities exceed 1");
    let mut world = World::new(cfg)?;
    let mut rng = stream(seed, streams::SYNTH);
    let mut corpus = Vec::new();
    let mut book = 0;
    for author in 0..cfg.authors {
        for _ in 0..cfg.books_per_author {
            let topic = rng.random_range(0..cfg.topics);
            let names = world.fresh_names(cfg.names_per_book);
            let group = format!("book{book:04}");
            for _ in 0..cfg.sentences_per_book {
                corpus.push(Record {
                    text: world.sentence(cfg, author, topic, &names, &mut rng),
                    group: group.clone(),
                    label: format!("author{author:03}"),
                });
            }
            book += 1;
        }
    }
    let mut utility = Vec::new();
    for u in 0..cfg.utility_books {
        let author = rng.random_range(0..cfg.authors);
        let topic = u % cfg.topics;
        let names = world.fresh_names(cfg.names_per_book);
        for _ in 0..cfg.sentences_per_book {
            utility.push(Record {
                text: world.sentence(cfg, author, topic, &names, &mut rng),
                group: format!("ubook{u:04}"),
                label: format!("topic{topic:02}"),
            });
        }
    }
    Ok(SynthCorpus { corpus, utility })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn words_are_unique_and_tokenizer_safe() {
        let ws: Vec<String> = (0..10_000).map(synth_word).collect();
        let set: BTreeSet<&String> = ws.iter().collect();
        assert_eq!(set.len(), ws.len());
        for w in ws.iter().take(50) {
            assert_eq!(crate::corpus::tokenize(w), vec![w.clone()]);
        }
    }

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig {
            authors: 3,
            books_per_author: 2,
            sentences_per_book: 4,
            utility_books: 2,
            ..Default::default()
        };
        let a = synth_corpus(&cfg, 1).unwrap();
        assert_eq!(a.corpus.len(), 24);
        assert_eq!(a.utility.len(), 8);
        assert_eq!(a, synth_corpus(&cfg, 1).unwrap());
        assert_ne!(a, synth_corpus(&cfg, 2).unwrap());
        for r in &a.corpus {
            let n = r.text.split(' ').count();
            assert!((5..=10).contains(&n));
        }
    }
}
