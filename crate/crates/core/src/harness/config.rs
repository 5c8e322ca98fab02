//! Typed TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribute::{AttributeConfig, TextCnnConfig};
use crate::defense::{utility_probe_config, ATTRIBUTE_GRID, WORD_GRID};
use crate::error::{Error, Result};
use crate::inversion::{MlcConfig, MspConfig, RelaxedConfig, SparseConfig};
use crate::membership::LearnedSimilarityConfig;
use crate::numerics::rng::child_seed;
use crate::sentence_encoder::EncoderConfig;
use crate::word_embedding::{CoocConfig, SgnsConfig, TrainerTag};

use super::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub word: WordSection,
    pub sentence: EncoderConfig,
    pub attack: AttackSection,
    pub defense: DefenseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            word: WordSection::default(),
            sentence: EncoderConfig::default(),
            attack: AttackSection::default(),
            defense: DefenseSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    /// `.jsonl` records or plain text.
    pub path: PathBuf,
    /// Adversary auxiliary corpus. Without it a share of the held-out
    /// documents is used.
    pub aux_path: Option<PathBuf>,
    /// Topic-labelled set for the utility probe.
    pub utility_path: Option<PathBuf>,
    /// Share of documents that go to training.
    pub split_ratio: f64,
    /// Share of held-out documents handed to the adversary as aux data.
    pub aux_fraction: f64,
    pub min_count: u64,
    pub max_len: usize,
    /// Used by `corpus synth`.
    pub synth: SynthConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/corpus.jsonl"),
            aux_path: None,
            utility_path: None,
            split_ratio: 0.5,
            aux_fraction: 0.5,
            min_count: 2,
            max_len: 32,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WordSection {
    pub trainer: TrainerTag,
    pub sgns: SgnsConfig,
    pub cooc: CoocConfig,
}

impl Default for WordSection {
    fn default() -> Self {
        Self {
            trainer: TrainerTag::Sgns,
            sgns: SgnsConfig::default(),
            cooc: CoocConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMode {
    Relaxed,
    Sparse,
    Mlc,
    Msp,
}

impl InversionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InversionMode::Relaxed => "relaxed",
            InversionMode::Sparse => "sparse",
            InversionMode::Mlc => "mlc",
            InversionMode::Msp => "msp",
        }
    }
}

/// Objective used by relaxed inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelaxedTarget {
    /// Match the encoder output.
    Direct,
    /// Match a linear map of the target onto the word-average space.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub mode: InversionMode,
    /// Cap on inversion targets; 0 means all eligible.
    pub n_targets: usize,
    /// Target sentences must have between `min_len` and `max_len` tokens.
    pub min_len: usize,
    pub max_len: usize,
    pub relaxed_objective: RelaxedTarget,
    /// Ridge weight of the lower-layer map.
    pub lower_l2: f64,
    pub relaxed: RelaxedConfig,
    pub sparse: SparseConfig,
    pub mlc: MlcConfig,
    pub msp: MspConfig,
    pub attribute: AttributeSection,
    pub membership: MembershipSection,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            mode: InversionMode::Sparse,
            n_targets: 200,
            min_len: 5,
            max_len: 10,
            relaxed_objective: RelaxedTarget::Direct,
            lower_l2: 1e-3,
            relaxed: RelaxedConfig::default(),
            sparse: SparseConfig::default(),
            mlc: MlcConfig::default(),
            msp: MspConfig::default(),
            attribute: AttributeSection::default(),
            membership: MembershipSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeSection {
    pub classes: usize,
    /// Labelled aux examples per class, one run each.
    pub n_aux: Vec<usize>,
    pub n_target: usize,
    pub trials: usize,
    pub probe: AttributeConfig,
    pub baseline: TextCnnConfig,
}

impl Default for AttributeSection {
    fn default() -> Self {
        Self {
            classes: 20,
            n_aux: vec![10, 50],
            n_target: 40,
            trials: 3,
            probe: AttributeConfig::default(),
            baseline: TextCnnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MembershipLevel {
    Word,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembershipSection {
    pub level: MembershipLevel,
    /// Share of each evaluation set used to pick the threshold.
    pub cal_fraction: f64,
    /// Share of documents per side reserved to train the learned metric.
    pub learned_fraction: f64,
    pub learned: LearnedSimilarityConfig,
}

impl Default for MembershipSection {
    fn default() -> Self {
        Self {
            level: MembershipLevel::Word,
            cal_fraction: 0.5,
            learned_fraction: 0.2,
            learned: LearnedSimilarityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Word,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseSection {
    pub kind: SweepKind,
    pub lambda_w: Vec<f64>,
    pub lambda_s: Vec<f64>,
    /// Number of seeds per grid cell.
    pub seeds: usize,
    pub utility: AttributeConfig,
    /// Share of utility documents used for probe training.
    pub utility_train_fraction: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            kind: SweepKind::Word,
            lambda_w: WORD_GRID.to_vec(),
            lambda_s: ATTRIBUTE_GRID.to_vec(),
            seeds: 1,
            utility: utility_probe_config(0),
            utility_train_fraction: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(de, |path| unknown.push(path.to_string())).map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.corpus.split_ratio > 0.0 && self.corpus.split_ratio < 1.0) {
            return bad("corpus.split_ratio must lie in (0, 1)");
        }
        if !(self.corpus.aux_fraction > 0.0 && self.corpus.aux_fraction < 1.0) {
            return bad("corpus.aux_fraction must lie in (0, 1)");
        }
        if self.attack.min_len == 0 || self.attack.min_len > self.attack.max_len {
            return bad("attack.min_len must satisfy 1 <= min_len <= max_len");
        }
        let m = &self.attack.membership;
        if !(m.cal_fraction > 0.0 && m.cal_fraction < 1.0) || !(m.learned_fraction > 0.0 && m.learned_fraction < 1.0) {
            return bad("membership fractions must lie in (0, 1)");
        }
        if !(m.learned.val_fraction >= 0.0 && m.learned.val_fraction < 1.0) {
            return bad("attack.membership.learned.val_fraction must lie in [0, 1)");
        }
        if self.defense.seeds == 0 {
            return bad("defense.seeds must be at least 1");
        }
        if self.defense.lambda_w.iter().chain(&self.defense.lambda_s).any(|l| !(*l >= 0.0)) {
            return bad("defense grids must be non-negative");
        }
        Ok(())
    }

    /// Copy with every component seed derived from the top-level seed. Seeds
    /// written inside sub-sections are ignored, as is `sentence.max_len`,
    /// which follows `corpus.max_len`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.word.sgns.seed = child_seed(s, 1);
        c.word.cooc.seed = child_seed(s, 2);
        c.sentence.seed = child_seed(s, 3);
        c.attack.relaxed.seed = child_seed(s, 4);
        c.attack.mlc.seed = child_seed(s, 5);
        c.attack.msp.seed = child_seed(s, 6);
        c.attack.attribute.probe.seed = child_seed(s, 7);
        c.attack.attribute.baseline.seed = child_seed(s, 8);
        c.attack.membership.learned.seed = child_seed(s, 9);
        c.defense.utility.seed = child_seed(s, 10);
        // encoders see exactly the token sequences the corpus stage produces
        c.sentence.max_len = c.corpus.max_len;
        c
    }

    /// First 16 hex digits of the SHA-256 of the resolved config as JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.resolved()).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Compact JSON of the resolved config, embedded in output artifacts.
    pub fn embedded_json(&self) -> String {
        serde_json::to_string(&self.resolved()).expect("config serializes")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = ExperimentConfig::from_toml(
            "seed = 9\n[sentence]\narch = \"recurrent\"\n[attack]\nmode = \"msp\"\n[attack.sparse]\nlambda = 0.02\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.attack.mode, InversionMode::Msp);
        assert_eq!(c.attack.sparse.lambda, 0.02);
        assert_eq!(c.attack.sparse.tau, SparseConfig::default().tau);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(ExperimentConfig::from_toml("[corpus]\nsplit_ratio = 1.5\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("seed = \"x\"\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[defense]\nlambda_w = [-1.0]\n"), Err(Error::Config(_))));
        let e = ExperimentConfig::from_toml("[attack.sparse]\ntua = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("attack.sparse.tua"), "{e}");
    }

    #[test]
    fn hash_ignores_inner_seeds_but_not_the_run_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.attack.mlc.seed = 123;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
