//! TOML run configuration. Every section is optional; unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use longctx::encoder::EncoderConfig;
use longctx::losses::LossKind;
use longctx::retrieval::{EmbeddingStrategy, DEFAULT_K, PAPER_LENGTHS};
use longctx::synth::NeedleTaskSpec;
use longctx::training::{FinetuneConfig, MixtureSpec, PretrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every section's seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `truncate` or `chunk`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Overrides `finetune.loss` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub synth: NeedleTaskSpec,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
    /// Pretraining metrics TSV; defaults to `<out>.metrics.tsv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

/// Pretraining text. Either three files (one passage per line, one file
/// per source) or the built-in synthetic desk corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub files: Vec<PathBuf>,
    #[serde(default = "default_passages")]
    pub synthetic_passages: usize,
}

fn default_passages() -> usize {
    400
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            synthetic_passages: default_passages(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_lengths() -> Vec<usize> {
    PAPER_LENGTHS.to_vec()
}
fn default_runs() -> usize {
    5
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: default_lengths(),
            runs: default_runs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed and loss into the sections that use them.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        if let Some(seed) = self.seed {
            self.encoder.seed = seed;
            self.pretrain.seed = seed;
            self.finetune.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(loss) = self.loss {
            self.finetune.loss = loss;
        }
        self.strategy()?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<EmbeddingStrategy, CliError> {
        match &self.strategy {
            None => Ok(EmbeddingStrategy::Truncate),
            Some(s) => s.parse().map_err(|e: longctx::Error| CliError::Usage(e.to_string())),
        }
    }

    pub fn render(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unrenderable config: {e}>"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_in_every_section() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[pretrain]\nsteps = 3\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[paths]\nmodle = \"x\"").is_err());
    }

    #[test]
    fn top_level_seed_and_loss_win() {
        let mut c: RunConfig = toml::from_str("seed = 9\nloss = \"mnrl\"\n[pretrain]\nseed = 1\nsteps = 2\nbatch_size = 1\nlr = 0.1").unwrap();
        c.resolve().unwrap();
        assert_eq!((c.encoder.seed, c.pretrain.seed, c.synth.seed), (9, 9, 9));
        assert_eq!(c.finetune.loss, LossKind::Mnrl);
        let back: RunConfig = toml::from_str(&c.render()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_strategy_is_usage_error() {
        let mut c: RunConfig = toml::from_str("strategy = \"sideways\"").unwrap();
        assert!(matches!(c.resolve(), Err(CliError::Usage(_))));
    }
}
