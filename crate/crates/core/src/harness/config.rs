use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{PolicyKind, RemaskPolicy};
use crate::model::ModelConfig;
use crate::scene::{self, Codebook, CorruptionConfig};
use crate::training::TrainConfig;
use crate::vocab::{Vocab, LOWERCASE};

pub const CONFIG_VERSION: u32 = 1;

fn default_charset() -> String {
    LOWERCASE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_charset")]
    pub charset: String,
    /// One word per line. When absent the bundled 500-word lexicon is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub policy: PolicyKind,
    pub steps: usize,
}

/// Everything needed to reproduce one experiment. Serialized as TOML; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale setting: L = 12, D = 64, N = 2, 4 heads, lowercase
    /// charset (vocab 28), 500-word lexicon, 25% occlusion, 10% substitution.
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig { seq_len: 12, vocab_size: 28, d_model: 64, layers: 2, heads: 4, d_ff: 256, feat_len: 12 },
            train: TrainConfig::default(),
            data: DataConfig {
                charset: default_charset(),
                lexicon_path: None,
                n_train: 20_000,
                n_eval: 1_000,
                corruption: CorruptionConfig { occlusion_rate: 0.25, substitution_rate: 0.1, noise_sigma: 0.1 },
                seed: 2024,
            },
            infer: InferConfig { policy: PolicyKind::Blc, steps: 3 },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads and validates a config file. A relative `lexicon_path` is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(lex) = &cfg.data.lexicon_path {
            if lex.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.lexicon_path = Some(base.join(lex));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.corruption.validate()?;
        let vocab = self.vocab()?;
        if self.model.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "model.vocab_size {} but charset gives {} tokens",
                self.model.vocab_size,
                vocab.size()
            )));
        }
        if self.model.feat_len != self.model.seq_len {
            return Err(Error::Config("feature grid length must equal seq_len".into()));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        if let Some(p) = &self.data.lexicon_path {
            if !p.exists() {
                return Err(Error::Config(format!("lexicon {} does not exist", p.display())));
            }
        }
        RemaskPolicy::new(self.infer.policy, self.infer.steps, self.model.seq_len)?;
        if self.train.mask_strategy_set.iter().any(|s| s.needs_confidence()) {
            crate::inference::blocks(self.model.seq_len, self.train.blc_steps)?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.data.charset)
    }

    pub fn lexicon(&self) -> Result<Vec<String>> {
        let vocab = self.vocab()?;
        match &self.data.lexicon_path {
            Some(p) => scene::load_lexicon(p, &vocab, self.model.seq_len),
            None => scene::parse_lexicon(scene::BUNDLED_LEXICON, &vocab, self.model.seq_len),
        }
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Ok(Codebook::new(&self.vocab()?, self.model.d_model, self.data.seed))
    }

    /// Stable 64-bit fingerprint of the serialized config.
    pub fn hash(&self) -> u64 {
        crate::rng::hash_str(&self.to_toml())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}
