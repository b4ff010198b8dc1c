use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How an auxiliary embedding joins the projected features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    None,
    /// Append the embedding to every frame: width M + D.
    Concat,
    /// `h_t + w·e` (or `(1−w)·h_t + w·e` when convex): width M, needs D = M.
    WeightedSum,
}

/// Training regime for the accent branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Baseline,
    /// Accent gradients are reversed into the encoder.
    Dat,
    /// Accent gradients flow into the encoder unchanged.
    Mtl,
}

impl Mode {
    /// Gradient-reversal coefficient between encoder and accent head.
    pub fn grl_coeff(self) -> Option<f64> {
        match self {
            Mode::Baseline => None,
            Mode::Dat => Some(-1.0),
            Mode::Mtl => Some(1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Dat => "dat",
            Mode::Mtl => "mtl",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Mode::Baseline),
            "dat" => Ok(Mode::Dat),
            "mtl" => Ok(Mode::Mtl),
            other => Err(Error::config(
                "train.mode",
                format!("unknown mode `{other}` (expected baseline, dat or mtl)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input feature dimension F.
    pub feature_dim: usize,
    /// Output channels of each conv stage (kernel 3, pool 2).
    pub conv_channels: Vec<usize>,
    /// Projection width M.
    pub proj_dim: usize,
    /// Auxiliary embedding width D.
    pub emb_dim: usize,
    pub fusion: Fusion,
    pub fusion_weight: f64,
    /// Use `(1−w)·h + w·e` instead of `h + w·e`.
    pub fusion_convex: bool,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// 1-based layers feeding intermediate CTC heads.
    pub ctc_taps: Vec<usize>,
    /// 1-based layer feeding the accent classifier.
    pub accent_tap: usize,
    /// Hidden width of every head's first linear layer.
    pub head_dim: usize,
    /// Output symbols including the blank.
    pub vocab: usize,
    /// Accent classes.
    pub accents: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            conv_channels: vec![32],
            proj_dim: 32,
            emb_dim: 8,
            fusion: Fusion::None,
            fusion_weight: 0.2,
            fusion_convex: false,
            layers: 4,
            heads: 2,
            ffn_dim: 64,
            ctc_taps: vec![1, 2, 3],
            accent_tap: 2,
            head_dim: 64,
            vocab: 12,
            accents: 6,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Layer sizes at the scale of the original system (24 layers, width 512).
    pub fn full_scale() -> Self {
        ModelConfig {
            feature_dim: 80,
            conv_channels: vec![32, 64, 128],
            proj_dim: 512,
            emb_dim: 512,
            fusion: Fusion::None,
            fusion_weight: 0.2,
            fusion_convex: false,
            layers: 24,
            heads: 8,
            ffn_dim: 2048,
            ctc_taps: vec![6, 12, 18],
            accent_tap: 7,
            head_dim: 256,
            vocab: 5000,
            accents: 21,
            ln_eps: 1e-6,
        }
    }

    /// Switches fusion mode, adjusting M and D the way the desk-scale
    /// defaults do (concat: M=¾W, D=¼W; weighted sum: D=M).
    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        let width = self.width();
        match fusion {
            Fusion::None => self.proj_dim = width,
            Fusion::Concat => {
                self.emb_dim = width / 4;
                self.proj_dim = width - self.emb_dim;
            }
            Fusion::WeightedSum => {
                self.proj_dim = width;
                self.emb_dim = width;
            }
        }
        self.fusion = fusion;
        self
    }

    /// Transformer width after fusion.
    pub fn width(&self) -> usize {
        match self.fusion {
            Fusion::Concat => self.proj_dim + self.emb_dim,
            _ => self.proj_dim,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.conv_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("model.{field}"), msg));
        if self.feature_dim == 0 {
            return err("feature_dim", "must be positive".into());
        }
        if self.conv_channels.contains(&0) {
            return err("conv_channels", "channel counts must be positive".into());
        }
        if self.proj_dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return err("layers", "proj_dim, layers, heads and ffn_dim must be positive".into());
        }
        if self.width() % self.heads != 0 {
            return err(
                "heads",
                format!("width {} is not divisible by {} heads", self.width(), self.heads),
            );
        }
        if let Some(t) = self.ctc_taps.iter().find(|&&t| t == 0 || t > self.layers) {
            return err("ctc_taps", format!("tap {t} outside [1, {}]", self.layers));
        }
        if self.accent_tap == 0 || self.accent_tap > self.layers {
            return err(
                "accent_tap",
                format!("tap {} outside [1, {}]", self.accent_tap, self.layers),
            );
        }
        if self.fusion == Fusion::WeightedSum && self.emb_dim != self.proj_dim {
            return err(
                "emb_dim",
                format!(
                    "weighted_sum needs emb_dim == proj_dim ({} vs {})",
                    self.emb_dim, self.proj_dim
                ),
            );
        }
        if self.fusion != Fusion::None && self.emb_dim == 0 {
            return err("emb_dim", "must be positive when fusion is enabled".into());
        }
        if self.vocab < 2 {
            return err("vocab", "needs the blank plus at least one token".into());
        }
        if self.accents == 0 || self.head_dim == 0 {
            return err("accents", "accents and head_dim must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps", "must be positive".into());
        }
        Ok(())
    }
}
