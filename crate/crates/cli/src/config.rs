use std::path::{Path, PathBuf};

use marn::text::{SynthConfig, MAX_DOC_LEN, MIN_DOC_FREQ};
use marn::trainer::TrainConfig;
use marn::{MarnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_e: usize,
    pub d_r: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_e: 100,
            d_r: 256,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub corpus: PathBuf,
    pub mapping: PathBuf,
    /// Word-vector text file; when absent embeddings start random.
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            corpus: "data/corpus.csv".into(),
            mapping: "data/mapping.csv".into(),
            embeddings: Some("data/embeddings.txt".into()),
            output_dir: "runs".into(),
        }
    }
}

/// Everything one run needs. `train.seed` is not accepted in the file: the
/// top-level `seed` drives generation, splitting, initialization and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub max_len: usize,
    pub min_doc_freq: usize,
    pub split: [f64; 3],
    pub model: ModelDims,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_len: MAX_DOC_LEN,
            min_doc_freq: MIN_DOC_FREQ,
            split: [0.8, 0.1, 0.1],
            model: ModelDims::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| MarnError::Config(e.to_string()))?;
        if table.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(MarnError::Config("set `seed` at the top level, not under [train]".into()));
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| MarnError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MarnError::Io {
            path: path.into(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.min_doc_freq == 0 {
            return Err(MarnError::Config("max_len and min_doc_freq must be ≥ 1".into()));
        }
        if self.model.d_e == 0 || self.model.d_r == 0 || self.model.d_r % 2 == 1 {
            return Err(MarnError::Config("d_e must be ≥ 1 and d_r even and ≥ 2".into()));
        }
        self.train.validate()
    }

    pub fn train_file(&self) -> PathBuf {
        self.data.output_dir.join("train.csv")
    }

    pub fn val_file(&self) -> PathBuf {
        self.data.output_dir.join("val.csv")
    }

    pub fn test_file(&self) -> PathBuf {
        self.data.output_dir.join("test.csv")
    }

    pub fn vocab_file(&self) -> PathBuf {
        self.data.output_dir.join("vocab.txt")
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.data.output_dir.join("model.ckpt")
    }

    pub fn history_file(&self) -> PathBuf {
        self.data.output_dir.join("history.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.model.d_e, c.model.d_r, c.model.dropout), (100, 256, 0.2));
        assert_eq!((c.train.learning_rate, c.train.batch_size, c.train.patience), (0.001, 16, 10));
        assert_eq!((c.train.loss.alpha, c.train.loss.gamma), (0.999, 2.0));
        assert_eq!((c.train.loss.lambda_d, c.train.loss.lambda_s), (0.7, 0.3));
        assert_eq!((c.max_len, c.min_doc_freq), (4000, 3));
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[model]\nd_x = 3").is_err());
        assert!(RunConfig::parse("[train.loss]\nbeta = 1.0").is_err());
    }

    #[test]
    fn seed_lives_at_the_top_level() {
        let c = RunConfig::parse("seed = 7\n[train]\nbatch_size = 4").unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.batch_size), (7, 7, 4));
        assert!(RunConfig::parse("[train]\nseed = 7").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = "[train.ablation]\nuse_ram = false\n[synth]\nn_docs = 50\n[data]\noutput_dir = \"x\"";
        let c = RunConfig::parse(text).unwrap();
        assert!(!c.train.ablation.use_ram && c.train.ablation.use_mtl);
        assert_eq!(c.synth.n_docs, 50);
        assert_eq!(c.data.output_dir, PathBuf::from("x"));
    }
}
