//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"EMBL" | u32 version | u64 json_len | json metadata
//! per tensor: u32 name_len | name | u8 dtype (1 = f32) | u32 rank | u64 dims[rank] | f32 data
//! ```
//!
//! The metadata carries the model kind, its config, the vocabulary and its
//! hash. Parameters are stored as f32; loading widens them back to f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::sentence_encoder::{Arch, Encoder, EncoderConfig, EncoderParams, GruParams, SentenceEncoderModel};
use crate::word_embedding::{TrainerTag, WordEmbeddingModel};

use super::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"EMBL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpointed {
    Word(WordEmbeddingModel),
    Sentence(SentenceEncoderModel),
}

impl Checkpointed {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpointed::Word(_) => "word",
            Checkpointed::Sentence(_) => "sentence",
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Checkpointed::Word(m) => &m.vocab,
            Checkpointed::Sentence(m) => &m.vocab,
        }
    }

    pub fn into_word(self) -> Result<WordEmbeddingModel> {
        match self {
            Checkpointed::Word(m) => Ok(m),
            other => Err(Error::UnsupportedFormat(format!("expected a word checkpoint, found {}", other.kind()))),
        }
    }

    pub fn into_sentence(self) -> Result<SentenceEncoderModel> {
        match self {
            Checkpointed::Sentence(m) => Ok(m),
            other => Err(Error::UnsupportedFormat(format!("expected a sentence checkpoint, found {}", other.kind()))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabBlock {
    words: Vec<String>,
    counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    kind: String,
    config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainer: Option<TrainerTag>,
    vocab_hash: String,
    vocab: VocabBlock,
    tensor_count: u32,
    /// Experiment config of the producing run, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

fn tensors_of(model: &Checkpointed) -> Vec<(&'static str, &DenseMatrix)> {
    match model {
        Checkpointed::Word(m) => vec![("v", &m.v)],
        Checkpointed::Sentence(m) => {
            let mut t = vec![("word", &m.encoder.params.word)];
            if let Some(g) = &m.encoder.params.gru {
                t.extend([("gru.w", &g.w), ("gru.u", &g.u), ("gru.b", &g.b)]);
            }
            t
        }
    }
}

pub fn encode_checkpoint(model: &Checkpointed, run_config: Option<&serde_json::Value>) -> Vec<u8> {
    let vocab = model.vocab();
    let tensors = tensors_of(model);
    let (config, trainer) = match model {
        Checkpointed::Word(m) => (m.config.clone(), Some(m.trainer)),
        Checkpointed::Sentence(m) => (serde_json::to_value(&m.config).expect("config serializes"), None),
    };
    let meta = Metadata {
        kind: model.kind().to_string(),
        config,
        trainer,
        vocab_hash: vocab.hash(),
        vocab: VocabBlock {
            words: vocab.words().to_vec(),
            counts: vocab.counts().to_vec(),
        },
        tensor_count: tensors.len() as u32,
        run_config: run_config.cloned(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(json.len() + 64 + tensors.iter().map(|(_, t)| t.len() * 4).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::CorruptCheckpoint(format!("{what} overflows")))
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpointed> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::UnsupportedFormat("missing EMBL magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let json_len = r.len("metadata length")?;
    let meta: Metadata = serde_json::from_slice(r.take(json_len, "metadata")?).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let mut tensors: Vec<(String, DenseMatrix)> = Vec::with_capacity(meta.tensor_count as usize);
    for _ in 0..meta.tensor_count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedFormat(format!("dtype tag {dtype} on tensor {name}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.len("dims")).collect::<Result<_>>()?;
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("tensor size overflows"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor size overflows"))?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        tensors.push((name, DenseMatrix::from_vec(rows, cols, data).map_err(|e| corrupt(e.to_string()))?));
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let vocab = Vocabulary::from_words_and_counts(meta.vocab.words, meta.vocab.counts).map_err(|e| corrupt(e.to_string()))?;
    if vocab.hash() != meta.vocab_hash {
        return Err(corrupt("vocabulary hash mismatch"));
    }
    let mut take = |name: &str| -> Result<DenseMatrix> {
        let i = tensors.iter().position(|(n, _)| n == name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        Ok(tensors.swap_remove(i).1)
    };
    let model = match meta.kind.as_str() {
        "word" => {
            let v = take("v")?;
            if v.rows() != vocab.len() {
                return Err(corrupt(format!("{} embedding rows for a vocabulary of {}", v.rows(), vocab.len())));
            }
            let trainer = meta.trainer.ok_or_else(|| corrupt("word checkpoint without trainer tag"))?;
            Checkpointed::Word(WordEmbeddingModel {
                vocab,
                v,
                trainer,
                config: meta.config,
            })
        }
        "sentence" => {
            let config: EncoderConfig = serde_json::from_value(meta.config).map_err(|e| corrupt(format!("encoder config: {e}")))?;
            let word = take("word")?;
            if word.rows() != vocab.len() || word.cols() != config.d_w {
                return Err(corrupt("word tensor does not match vocabulary and config"));
            }
            let gru = match config.arch {
                Arch::MeanPool => None,
                Arch::Recurrent => {
                    let g = GruParams {
                        w: take("gru.w")?,
                        u: take("gru.u")?,
                        b: take("gru.b")?,
                    };
                    let h = config.hidden;
                    if g.w.shape() != (3 * h, config.d_w) || g.u.shape() != (3 * h, h) || g.b.shape() != (1, 3 * h) {
                        return Err(corrupt("recurrent tensors do not match config"));
                    }
                    Some(g)
                }
            };
            let encoder = Encoder {
                arch: config.arch,
                reducer: config.reducer,
                params: EncoderParams { word, gru },
            };
            Checkpointed::Sentence(SentenceEncoderModel::new(encoder, vocab, config))
        }
        other => return Err(Error::UnsupportedFormat(format!("unknown model kind {other:?}"))),
    };
    if !tensors.is_empty() {
        return Err(corrupt(format!("unexpected tensor {}", tensors[0].0)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Checkpointed, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, None))
}

/// As [`save_checkpoint`], embedding the producing run's config.
pub fn save_checkpoint_with(model: &Checkpointed, path: &Path, run_config: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, Some(run_config)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpointed> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;
    use crate::sentence_encoder::Reducer;

    fn vocab(n: usize) -> Vocabulary {
        let mut words = vec![crate::corpus::UNK_TOKEN.to_string()];
        words.extend((1..n).map(|i| format!("w{i}")));
        Vocabulary::from_words_and_counts(words, (0..n as u64).rev().collect()).unwrap()
    }

    fn word_model(n: usize, d: usize) -> WordEmbeddingModel {
        WordEmbeddingModel {
            vocab: vocab(n),
            v: DenseMatrix::random_normal(n, d, 1.0, &mut stream(3, 0)),
            trainer: TrainerTag::Sgns,
            config: serde_json::json!({"d": d}),
        }
    }

    fn sentence_model(arch: Arch) -> SentenceEncoderModel {
        let cfg = EncoderConfig {
            arch,
            reducer: Reducer::Last,
            d_w: 5,
            hidden: 4,
            ..Default::default()
        };
        SentenceEncoderModel::new(Encoder::init(12, &cfg), vocab(12), cfg)
    }

    fn quantized(mut m: DenseMatrix) -> DenseMatrix {
        m.quantize_f32();
        m
    }

    #[test]
    fn word_round_trip_is_exact_at_f32() {
        let m = word_model(30, 7);
        let back = decode_checkpoint(&encode_checkpoint(&Checkpointed::Word(m.clone()), None)).unwrap().into_word().unwrap();
        assert_eq!(back.v, quantized(m.v.clone()));
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.trainer, m.trainer);
        let again = encode_checkpoint(&Checkpointed::Word(back.clone()), None);
        assert_eq!(decode_checkpoint(&again).unwrap(), Checkpointed::Word(back));
    }

    #[test]
    fn sentence_round_trip_both_archs() {
        for arch in [Arch::MeanPool, Arch::Recurrent] {
            let m = sentence_model(arch);
            let back = decode_checkpoint(&encode_checkpoint(&Checkpointed::Sentence(m.clone()), None)).unwrap().into_sentence().unwrap();
            assert_eq!(back.config, m.config);
            let x = [1, 4, 2, 9];
            let a = m.encode(&x).unwrap();
            let b = back.encode(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn size_matches_tensor_payload() {
        let m = Checkpointed::Word(word_model(500, 100));
        let bytes = encode_checkpoint(&m, None);
        let payload = 500 * 100 * 4;
        assert!(bytes.len() > payload && bytes.len() < payload + 20_000);
    }

    #[test]
    fn flipped_magic_and_version() {
        let mut bytes = encode_checkpoint(&Checkpointed::Word(word_model(10, 3)), None);
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::UnsupportedFormat(_))));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = encode_checkpoint(&Checkpointed::Sentence(sentence_model(Arch::Recurrent)), None);
        for cut in [5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::CorruptCheckpoint(_))));
    }
}
