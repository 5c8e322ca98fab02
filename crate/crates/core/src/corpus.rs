//! Text ingestion: tokenizer, vocabulary, windows, sentence pairs, frequency
//! buckets and document-level splits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, domain, Error, Result};
use crate::numerics::rng::{stream, streams};

/// Reserved id for out-of-vocabulary tokens.
pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";
/// Default sentence truncation length.
pub const DEFAULT_MAX_LEN: usize = 32;
/// Number of frequency buckets.
pub const NUM_BUCKETS: usize = 9;

/// Lowercases, splits on Unicode whitespace and strips non-alphanumeric
/// characters from both ends of each token. Tokens that strip to nothing are
/// dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let t = raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            // lowercasing can expose new edge symbols for a few scripts
            let t = t.trim_matches(|c: char| !c.is_alphanumeric());
            (!t.is_empty()).then(|| t.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// Bidirectional word/id map with corpus counts. Id 0 is [`UNK`]; its count
/// is the number of tokens that fell below `min_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    counts: Vec<u64>,
    total_tokens: u64,
}

impl Vocabulary {
    /// Builds a vocabulary from an iterator of text lines.
    ///
    /// Retained words are ordered by descending count, then lexicographically,
    /// so ids are deterministic for identical input.
    pub fn from_texts<'a, I>(lines: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut total = 0u64;
        for line in lines {
            for tok in tokenize(line) {
                total += 1;
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let min_count = min_count.max(1);
        let mut kept: Vec<(String, u64)> = Vec::new();
        let mut unk = 0u64;
        for (w, c) in freq {
            if c >= min_count && w != UNK_TOKEN {
                kept.push((w, c));
            } else {
                unk += c;
            }
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec![UNK_TOKEN.to_string()];
        let mut counts = vec![unk];
        for (w, c) in kept {
            words.push(w);
            counts.push(c);
        }
        Ok(Self::from_parts(words, counts, total))
    }

    fn from_parts(words: Vec<String>, counts: Vec<u64>, total_tokens: u64) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            words,
            ids,
            counts,
            total_tokens,
        }
    }

    /// Rebuilds a vocabulary from its stored word list and counts.
    pub fn from_words_and_counts(words: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        contract!(words.len() == counts.len(), "word and count lists differ in length");
        contract!(
            words.first().map(String::as_str) == Some(UNK_TOKEN),
            "vocabulary must start with {UNK_TOKEN}"
        );
        let total = counts.iter().sum();
        let v = Self::from_parts(words, counts, total);
        contract!(v.ids.len() == v.words.len(), "duplicate words in vocabulary");
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Tokenizes and maps `text` to ids, truncating to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect()
    }

    /// `word\tid\tcount` lines, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let _ = writeln!(out, "{w}\t{i}\t{}", self.counts[i]);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("vocab line {}: expected 3 fields", lineno + 1)));
            }
            let id: usize = parts[1]
                .parse()
                .map_err(|_| Error::Parse(format!("vocab line {}: bad id", lineno + 1)))?;
            if id != words.len() {
                return Err(Error::Parse(format!("vocab line {}: ids must be dense and ordered", lineno + 1)));
            }
            let c: u64 = parts[2]
                .parse()
                .map_err(|_| Error::Parse(format!("vocab line {}: bad count", lineno + 1)))?;
            words.push(parts[0].to_string());
            counts.push(c);
        }
        Self::from_words_and_counts(words, counts).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Hex sha256 of the TSV serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads a newline-delimited UTF-8 file and builds its vocabulary.
pub fn build_vocabulary(corpus_path: &Path, min_count: u64) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    Vocabulary::from_texts(text.lines(), min_count)
}

/// Center word plus its surrounding ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub center: usize,
    pub context: Vec<usize>,
    pub source_split: Split,
}

/// Iterator returned by [`sliding_windows`].
#[derive(Debug, Clone)]
pub struct SlidingWindows<'a> {
    tokens: &'a [usize],
    radius: usize,
    pos: usize,
    split: Split,
}

impl SlidingWindows<'_> {
    pub fn in_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

impl Iterator for SlidingWindows<'_> {
    type Item = ContextWindow;

    fn next(&mut self) -> Option<ContextWindow> {
        if self.pos >= self.tokens.len() {
            return None;
        }
        let i = self.pos;
        self.pos += 1;
        let lo = i.saturating_sub(self.radius);
        let hi = (i + self.radius + 1).min(self.tokens.len());
        let context = (lo..hi).filter(|&j| j != i).map(|j| self.tokens[j]).collect();
        Some(ContextWindow {
            center: self.tokens[i],
            context,
            source_split: self.split,
        })
    }
}

/// One window per position, truncated at the edges. A single-token sequence
/// yields a window with an empty context, which trainers skip.
pub fn sliding_windows(tokens: &[usize], radius: usize) -> Result<SlidingWindows<'_>> {
    domain!(radius >= 1, "window radius must be at least 1");
    Ok(SlidingWindows {
        tokens,
        radius,
        pos: 0,
        split: Split::Train,
    })
}

/// Adjacent sentences from one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub group_key: String,
    pub source_split: Split,
}

/// `(s_i, s_{i+1})` for consecutive encoded sentences. Pairs containing an
/// empty sentence are dropped.
pub fn sentence_pairs(document: &[Vec<usize>], group_key: &str) -> Vec<SentencePair> {
    document
        .windows(2)
        .filter(|w| !w[0].is_empty() && !w[1].is_empty())
        .map(|w| SentencePair {
            first: w[0].clone(),
            second: w[1].clone(),
            group_key: group_key.to_string(),
            source_split: Split::Train,
        })
        .collect()
}

/// Frequency deciles over the retained (non-UNK) words. Bucket 1 holds the
/// most frequent words, bucket 9 the rarest.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBuckets {
    /// Largest count found in each bucket, bucket 1 first.
    pub percentile_edges: Vec<u64>,
    /// Bucket per word id; 0 for UNK.
    pub bucket_of: Vec<u8>,
    sorted_counts: Vec<u64>,
}

impl FrequencyBuckets {
    pub fn bucket(&self, id: usize) -> Option<usize> {
        match self.bucket_of.get(id) {
            Some(&b) if b > 0 => Some(b as usize),
            _ => None,
        }
    }

    /// Bucket for an arbitrary (possibly averaged) count: the fraction of
    /// words strictly more frequent decides the decile, so equal counts land
    /// in the same, lowest possible bucket.
    pub fn bucket_for_count(&self, count: f64) -> usize {
        let n = self.sorted_counts.len();
        // sorted_counts is descending; count entries strictly above `count`
        let above = self.sorted_counts.partition_point(|&c| c as f64 > count);
        (above * NUM_BUCKETS / n + 1).min(NUM_BUCKETS)
    }

    /// Bucket of a sentence: decile of the mean count of its non-UNK words.
    pub fn bucket_of_sentence(&self, vocab: &Vocabulary, ids: &[usize]) -> Option<usize> {
        let known: Vec<u64> = ids.iter().filter(|&&i| i != UNK).map(|&i| vocab.count(i)).collect();
        if known.is_empty() {
            return None;
        }
        let mean = known.iter().sum::<u64>() as f64 / known.len() as f64;
        Some(self.bucket_for_count(mean))
    }
}

pub fn frequency_percentile_buckets(vocab: &Vocabulary) -> Result<FrequencyBuckets> {
    let n = vocab.len().saturating_sub(1);
    contract!(n >= NUM_BUCKETS + 1, "frequency buckets need at least 10 retained words, have {n}");
    let mut order: Vec<usize> = (1..vocab.len()).collect();
    order.sort_by(|&a, &b| vocab.count(b).cmp(&vocab.count(a)).then(a.cmp(&b)));
    let sorted_counts: Vec<u64> = order.iter().map(|&i| vocab.count(i)).collect();
    let percentile_edges = (0..NUM_BUCKETS).map(|k| sorted_counts[k * n / NUM_BUCKETS]).collect();
    let mut fb = FrequencyBuckets {
        percentile_edges,
        bucket_of: vec![0; vocab.len()],
        sorted_counts,
    };
    for id in 1..vocab.len() {
        fb.bucket_of[id] = fb.bucket_for_count(vocab.count(id) as f64) as u8;
    }
    Ok(fb)
}

/// Document-level split. The training side gets `ceil(ratio * n)` documents;
/// each side keeps the original document order.
pub fn split_corpus<T: Clone>(documents: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    domain!(ratio > 0.0 && ratio < 1.0, "split ratio must lie in (0, 1), got {ratio}");
    let n = documents.len();
    let n_train = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::SPLIT));
    let mut train_idx = idx[..n_train.min(n)].to_vec();
    let mut held_idx = idx[n_train.min(n)..].to_vec();
    train_idx.sort_unstable();
    held_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| documents[i].clone()).collect(),
        held_idx.iter().map(|&i| documents[i].clone()).collect(),
    ))
}

/// One JSON-lines corpus record: a sentence with its document group and an
/// optional categorical label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub group: String,
    #[serde(default)]
    pub label: String,
}

/// Sentences of one document in reading order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub group: String,
    pub label: String,
    pub sentences: Vec<String>,
}

impl Document {
    /// Encodes every sentence, truncated to `max_len`.
    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
        self.sentences.iter().map(|s| vocab.encode(s, max_len)).collect()
    }

    pub fn pairs(&self, vocab: &Vocabulary, max_len: usize, split: Split) -> Vec<SentencePair> {
        let mut pairs = sentence_pairs(&self.encode(vocab, max_len), &self.group);
        pairs.iter_mut().for_each(|p| p.source_split = split);
        pairs
    }
}

/// Groups records into documents by `group`, in order of first appearance.
pub fn documents_from_records(records: &[Record]) -> Vec<Document> {
    let mut order: Vec<String> = Vec::new();
    let mut by_group: HashMap<String, Document> = HashMap::new();
    for r in records {
        let doc = by_group.entry(r.group.clone()).or_insert_with(|| {
            order.push(r.group.clone());
            Document {
                group: r.group.clone(),
                label: r.label.clone(),
                sentences: Vec::new(),
            }
        });
        doc.sentences.push(r.text.clone());
    }
    order.into_iter().map(|g| by_group.remove(&g).unwrap()).collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("jsonl line {}: {e}", i + 1))))
        .collect()
}

pub fn records_to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Plain text: one sentence per line, documents separated by blank lines.
/// Documents are named `doc<index>`.
pub fn parse_plain(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, docs: &mut Vec<Document>| {
        if !current.is_empty() {
            docs.push(Document {
                group: format!("doc{}", docs.len()),
                label: String::new(),
                sentences: std::mem::take(current),
            });
        }
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut docs);
        } else {
            current.push(line.to_string());
        }
    }
    flush(&mut current, &mut docs);
    docs
}

/// Loads a corpus file; `.jsonl` files are parsed as records, anything else
/// as plain text.
pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let docs = if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        documents_from_records(&parse_jsonl(&text)?)
    } else {
        parse_plain(&text)
    };
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(docs)
}

/// Vocabulary over all sentences of `docs`.
pub fn vocabulary_of(docs: &[Document], min_count: u64) -> Result<Vocabulary> {
    Vocabulary::from_texts(docs.iter().flat_map(|d| d.sentences.iter().map(String::as_str)), min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Hello, World!  (it's) --"), vec!["hello", "world", "it's"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn vocabulary_counts() {
        let v = Vocabulary::from_texts(["a b a"], 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.count(v.id("a")), 2);
        assert_eq!(v.count(v.id("b")), 1);
        assert_eq!(v.id("a"), 1);

        let v2 = Vocabulary::from_texts(["a b a"], 2).unwrap();
        assert_eq!(v2.len(), 2);
        assert_eq!(v2.id("b"), UNK);
        assert_eq!(v2.count(UNK), 1);
        assert!(matches!(Vocabulary::from_texts(["  ", ""], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocabulary_is_deterministic_on_large_input() {
        let mut text = String::new();
        let mut x = 12345u64;
        while text.len() < 1 << 20 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let _ = write!(text, "w{} ", (x >> 33) % 3000);
            if x % 17 == 0 {
                text.push('\n');
            }
        }
        let a = Vocabulary::from_texts(text.lines(), 2).unwrap();
        let b = Vocabulary::from_texts(text.lines(), 2).unwrap();
        assert_eq!(a.to_tsv().as_bytes(), b.to_tsv().as_bytes());
        assert_eq!(Vocabulary::from_tsv(&a.to_tsv()).unwrap(), a);
    }

    #[test]
    fn windows_examples() {
        let w: Vec<_> = sliding_windows(&[1, 2, 3], 2).unwrap().collect();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].center, 2);
        assert_eq!(w[1].context, vec![1, 3]);

        let single: Vec<_> = sliding_windows(&[7], 5).unwrap().collect();
        assert_eq!(single.len(), 1);
        assert!(single[0].context.is_empty());

        let tokens: Vec<usize> = (1..=10).collect();
        let ten: Vec<_> = sliding_windows(&tokens, 2).unwrap().collect();
        assert_eq!(ten.len(), 10);
        assert!(ten[2..8].iter().all(|w| w.context.len() == 4));
        assert_eq!(sliding_windows(&[], 1).unwrap().count(), 0);
        assert!(sliding_windows(&tokens, 0).is_err());
    }

    #[test]
    fn pairs_examples() {
        let s = |x: usize| vec![x];
        let p = sentence_pairs(&[s(1), s(2), s(3)], "g");
        assert_eq!(p.len(), 2);
        assert_eq!((p[0].first.clone(), p[0].second.clone()), (s(1), s(2)));
        assert_eq!((p[1].first.clone(), p[1].second.clone()), (s(2), s(3)));
        assert!(sentence_pairs(&[s(1)], "g").is_empty());
        let doc: Vec<Vec<usize>> = (1..=100).map(s).collect();
        let p = sentence_pairs(&doc, "book");
        assert_eq!(p.len(), 99);
        assert!(p.iter().all(|x| x.group_key == "book"));
    }

    fn vocab_with_counts(counts: &[u64]) -> Vocabulary {
        let mut words = vec![UNK_TOKEN.to_string()];
        let mut c = vec![0];
        for (i, &k) in counts.iter().enumerate() {
            words.push(format!("w{i:02}"));
            c.push(k);
        }
        Vocabulary::from_words_and_counts(words, c).unwrap()
    }

    #[test]
    fn buckets_distinct_counts_spread_over_all_deciles() {
        let v = vocab_with_counts(&[100, 90, 80, 70, 60, 50, 40, 30, 20, 10]);
        let b = frequency_percentile_buckets(&v).unwrap();
        let got: Vec<usize> = (1..=10).map(|i| b.bucket(i).unwrap()).collect();
        // ten words over nine deciles: floor(rank * 9 / 10) + 1
        assert_eq!(got, vec![1, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        for k in 1..=9 {
            assert!(got.contains(&k));
        }
        assert_eq!(b.bucket(UNK), None);
        assert!(b.percentile_edges.windows(2).all(|e| e[0] >= e[1]));
    }

    #[test]
    fn buckets_equal_counts_all_first_decile() {
        let v = vocab_with_counts(&[5; 10]);
        let b = frequency_percentile_buckets(&v).unwrap();
        assert!((1..=10).all(|i| b.bucket(i) == Some(1)));
    }

    #[test]
    fn buckets_zipf_most_frequent_first() {
        let counts: Vec<u64> = (1..=200).map(|r| 10_000 / r).collect();
        let v = vocab_with_counts(&counts);
        let b = frequency_percentile_buckets(&v).unwrap();
        assert_eq!(b.bucket(1), Some(1));
        assert_eq!(b.bucket(200), Some(9));
        assert!(frequency_percentile_buckets(&vocab_with_counts(&[1; 5])).is_err());
    }

    #[test]
    fn split_examples() {
        let docs: Vec<usize> = (0..100).collect();
        let (a, b) = split_corpus(&docs, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (50, 50));
        assert_eq!(split_corpus(&docs, 0.5, 3).unwrap(), (a, b));
        let (a, b) = split_corpus(&[1, 2, 3], 0.5, 9).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(split_corpus(&docs, 1.0, 0).is_err());
    }

    #[test]
    fn records_group_into_documents() {
        let text = r#"{"text":"one two","group":"b1","label":"alice"}
{"text":"three","group":"b2","label":"bob"}
{"text":"four","group":"b1","label":"alice"}
"#;
        let recs = parse_jsonl(text).unwrap();
        let docs = documents_from_records(&recs);
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].sentences, vec!["one two", "four"]);
        assert_eq!(parse_jsonl(&records_to_jsonl(&recs)).unwrap(), recs);
        let plain = parse_plain("a b\nc d\n\ne f\n");
        assert_eq!(plain.len(), 2);
        assert_eq!(plain[1].group, "doc1");
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "\\PC{0,80}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn emitted_ids_are_in_vocab(words in proptest::collection::vec("[a-e]{1,2}", 1..60), radius in 1usize..4) {
            let text = words.join(" ");
            let v = Vocabulary::from_texts([text.as_str()], 2).unwrap();
            let ids = v.encode(&text, usize::MAX);
            for w in sliding_windows(&ids, radius).unwrap() {
                prop_assert!(w.center < v.len());
                prop_assert!(w.context.iter().all(|&c| c < v.len()));
                prop_assert!(w.context.len() <= 2 * radius);
            }
            let halves: Vec<Vec<usize>> = ids.chunks(3).map(|c| c.to_vec()).collect();
            for p in sentence_pairs(&halves, "g") {
                prop_assert!(p.first.iter().chain(&p.second).all(|&c| c < v.len()));
            }
        }

        #[test]
        fn split_partitions_input(n in 0usize..60, ratio in 0.05f64..0.95, seed in 0u64..1000) {
            let docs: Vec<usize> = (0..n).collect();
            let (a, b) = split_corpus(&docs, ratio, seed).unwrap();
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, docs);
            prop_assert!(a.iter().all(|x| !b.contains(x)));
        }
    }
}
