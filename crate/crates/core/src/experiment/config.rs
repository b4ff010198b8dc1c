use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{RemapOverride, TsneConfig};
use crate::embeddings::ExtractorConfig;
use crate::error::{Error, Result};
use crate::model::{Fusion, Mode, ModelConfig};
use crate::synth::{CorpusConfig, SplitMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccentLoss {
    #[default]
    Ce,
    Focal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    #[default]
    None,
    /// Trainable per-accent table indexed by the accent label.
    Labeled,
    /// Frozen vectors from the pooled accent classifier.
    Extracted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractedMode {
    /// Each utterance uses its own pooled vector.
    #[default]
    Utterance,
    /// Each utterance uses the mean vector of its accent.
    Accent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NovelStrategy {
    /// The accent's own table row, which training never updated.
    #[default]
    UntrainedRow,
    /// The dominant accent's row.
    DominantAccentRow,
}

impl NovelStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            NovelStrategy::UntrainedRow => "untrained_row",
            NovelStrategy::DominantAccentRow => "dominant_accent_row",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub accent_loss: AccentLoss,
    /// Weight of the intermediate CTC losses.
    pub lambda: f64,
    /// Accent-loss weight after activation; defaults to 0.03 for CE and 1.0 for focal.
    pub beta: Option<f64>,
    pub gamma: f64,
    pub epochs: usize,
    /// Last epoch with β_t = 0; defaults to ⌈E/2⌉.
    pub activation_epoch: Option<usize>,
    pub lr: f64,
    pub anneal_factor: f64,
    /// Annealing starts after this epoch; defaults to ⌈E/2⌉.
    pub anneal_epoch: Option<usize>,
    /// Anneal after every epoch past the boundary, rather than once.
    pub anneal_per_epoch: bool,
    pub batch_size: usize,
    /// Train the accent head on detached features while β_t = 0.
    pub accent_warmup: bool,
    pub split: SplitMode,
    /// Train on the dominant accent only.
    pub dominant_only: bool,
    pub embedding: EmbeddingSource,
    pub extracted_mode: ExtractedMode,
    /// Inference-time label corruption rate.
    pub corruption_rate: f64,
    pub novel_strategy: NovelStrategy,
    /// Remap table whose groups replace accent ids as classifier targets.
    pub remap_path: Option<PathBuf>,
    /// Precomputed utterance embeddings (JSON lines) for the extracted source.
    pub embeddings_path: Option<PathBuf>,
    /// Corpus file to train on instead of generating one.
    pub corpus_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Baseline,
            accent_loss: AccentLoss::Ce,
            lambda: 0.3,
            beta: None,
            gamma: 0.5,
            epochs: 12,
            activation_epoch: None,
            lr: 0.0012,
            anneal_factor: 0.95,
            anneal_epoch: None,
            anneal_per_epoch: true,
            batch_size: 8,
            accent_warmup: true,
            split: SplitMode::All,
            dominant_only: false,
            embedding: EmbeddingSource::None,
            extracted_mode: ExtractedMode::Utterance,
            corruption_rate: 0.0,
            novel_strategy: NovelStrategy::UntrainedRow,
            remap_path: None,
            embeddings_path: None,
            corpus_path: None,
        }
    }
}

impl TrainConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.accent_loss {
            AccentLoss::Ce => 0.03,
            AccentLoss::Focal => 1.0,
        })
    }

    /// γ passed to the class loss (0 reduces focal to CE).
    pub fn focal_gamma(&self) -> f64 {
        match self.accent_loss {
            AccentLoss::Ce => 0.0,
            AccentLoss::Focal => self.gamma,
        }
    }

    pub fn activation_epoch(&self) -> usize {
        self.activation_epoch.unwrap_or(self.epochs.div_ceil(2))
    }

    pub fn anneal_epoch(&self) -> usize {
        self.anneal_epoch.unwrap_or(self.epochs.div_ceil(2))
    }

    /// β_t for a 1-based epoch.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.mode == Mode::Baseline || epoch <= self.activation_epoch() {
            0.0
        } else {
            self.beta()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("train.{f}"), m));
        if !(self.lambda >= 0.0) {
            return err("lambda", format!("must be ≥ 0, got {}", self.lambda));
        }
        if !(self.beta() >= 0.0) {
            return err("beta", format!("must be ≥ 0, got {}", self.beta()));
        }
        if !(self.gamma >= 0.0) {
            return err("gamma", format!("must be ≥ 0, got {}", self.gamma));
        }
        if self.epochs == 0 {
            return err("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if !(self.lr > 0.0) {
            return err("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return err("anneal_factor", format!("must lie in (0, 1], got {}", self.anneal_factor));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return err("corruption_rate", format!("must lie in [0, 1], got {}", self.corruption_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub lda_dim: usize,
    pub groups: usize,
    pub overrides: Vec<RemapOverride>,
    pub tsne: TsneConfig,
    /// Utterances per accent fed to t-SNE (0 keeps all).
    pub tsne_per_accent: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            lda_dim: 4,
            groups: 3,
            overrides: Vec::new(),
            tsne: TsneConfig::default(),
            tsne_per_accent: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub rates: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rates: vec![0.0, 0.10, 0.25, 0.50],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds model initialisation and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_extractor")]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_extractor() -> ExtractorConfig {
    ExtractorConfig::default()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            extractor: ExtractorConfig::default(),
            analysis: AnalysisConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let rendered = toml::to_string(&table).map_err(|e| Error::config("<document>", e.to_string()))?;
        let de = toml::Deserializer::parse(&rendered).map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Default configuration with overrides applied.
    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml(&Self::default().to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.extractor.validate()?;
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(Error::config(
                "model.feature_dim",
                format!("{} does not match corpus.feature_dim {}", self.model.feature_dim, self.corpus.feature_dim),
            ));
        }
        if self.model.vocab != self.corpus.vocab {
            return Err(Error::config(
                "model.vocab",
                format!("{} does not match corpus.vocab {}", self.model.vocab, self.corpus.vocab),
            ));
        }
        if self.train.remap_path.is_none() && self.model.accents != self.corpus.accents {
            return Err(Error::config(
                "model.accents",
                format!("{} does not match corpus.accents {}", self.model.accents, self.corpus.accents),
            ));
        }
        let fused = self.model.fusion != Fusion::None;
        match (self.train.embedding, fused) {
            (EmbeddingSource::None, true) => {
                return Err(Error::config("train.embedding", "fusion is enabled but no embedding source is set"))
            }
            (EmbeddingSource::Labeled | EmbeddingSource::Extracted, false) => {
                return Err(Error::config("model.fusion", "an embedding source needs a fusion mode"))
            }
            _ => {}
        }
        if self.train.embedding == EmbeddingSource::Extracted && self.extractor.dim != self.model.emb_dim {
            return Err(Error::config(
                "extractor.dim",
                format!("{} does not match model.emb_dim {}", self.extractor.dim, self.model.emb_dim),
            ));
        }
        Ok(())
    }
}

/// Sets a dotted path (`train.epochs=4`) in a TOML table. The value is read
/// as a TOML literal when it parses as one and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
