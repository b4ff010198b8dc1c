//! Conv-subsampled transformer CTC encoder with intermediate CTC taps and a
//! mid-stack accent classifier behind a gradient-reversal node.

mod config;
pub mod layers;
pub mod loss;

use rand::Rng;

pub use config::{Fusion, ModelConfig, Mode};
pub use loss::{ce_loss, focal_loss};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use layers::{conv_subsample, fuse, head, linear, sinusoidal_positions, transformer_layer};

pub const ENCODER: &str = "enc";
pub const FINAL_CTC_HEAD: &str = "head.ctc_final";
pub const ACCENT_HEAD: &str = "head.accent";
pub const LABELED_EMBEDDING: &str = "emb.labeled";

pub fn tap_head_name(layer: usize) -> String {
    format!("head.ctc_tap{layer}")
}

/// Disjoint parameter groups: θ_E, θ_C, θ_{C,l}, θ_A, and the labeled table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    CtcFinal,
    CtcTap(usize),
    Accent,
    Embedding,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("enc.") {
            Some(ParamGroup::Encoder)
        } else if name.starts_with("head.ctc_final.") {
            Some(ParamGroup::CtcFinal)
        } else if let Some(rest) = name.strip_prefix("head.ctc_tap") {
            rest.split('.').next()?.parse().ok().map(ParamGroup::CtcTap)
        } else if name.starts_with("head.accent.") {
            Some(ParamGroup::Accent)
        } else if name.starts_with("emb.") {
            Some(ParamGroup::Embedding)
        } else {
            None
        }
    }
}

/// Builds all encoder and head parameters for `cfg`.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut c_in = cfg.feature_dim;
    for (s, &c_out) in cfg.conv_channels.iter().enumerate() {
        layers::init_linear(&mut store, &format!("{ENCODER}.conv{s}"), layers::CONV_KERNEL * c_in, c_out, rng);
        c_in = c_out;
    }
    layers::init_linear(&mut store, &format!("{ENCODER}.proj"), c_in, cfg.proj_dim, rng);
    let width = cfg.width();
    for l in 1..=cfg.layers {
        layers::init_transformer_layer(&mut store, &format!("{ENCODER}.layer{l}"), width, cfg.ffn_dim, rng);
    }
    for &t in &cfg.ctc_taps {
        layers::init_head(&mut store, &tap_head_name(t), width, cfg.head_dim, cfg.vocab, rng);
    }
    layers::init_head(&mut store, FINAL_CTC_HEAD, width, cfg.head_dim, cfg.vocab, rng);
    layers::init_head(&mut store, ACCENT_HEAD, width, cfg.head_dim, cfg.accents, rng);
    Ok(store)
}

/// Auxiliary embedding fed to the fusion layer.
#[derive(Clone, Copy, Debug)]
pub enum EmbeddingInput<'a> {
    None,
    /// Row of a trainable table parameter.
    Row { table: &'a str, index: usize },
    /// Fixed vector (e.g. extracted and z-normalised).
    Vector(&'a [f64]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Gradient-reversal coefficient of the accent branch; `None` drops the branch.
    pub accent_grl: Option<f64>,
    /// Stop after the accent tap (probe only; no CTC lattices).
    pub accent_only: bool,
}

impl ForwardOptions {
    pub fn for_mode(mode: Mode) -> Self {
        ForwardOptions {
            accent_grl: mode.grl_coeff(),
            accent_only: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// T'×V log-probability lattices: one per intermediate tap (in tap order), then the final head.
    pub ctc: Vec<Var>,
    /// 1×N accent log-probabilities.
    pub accent: Option<Var>,
    /// Frames after subsampling.
    pub frames: usize,
}

impl ForwardOutput {
    pub fn final_ctc(&self) -> Option<Var> {
        self.ctc.last().copied()
    }
}

/// Full forward pass for one utterance.
pub fn forward_full(
    g: &mut Graph,
    cfg: &ModelConfig,
    frames: &Tensor,
    emb: EmbeddingInput,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if frames.cols() != cfg.feature_dim {
        return Err(Error::Dimension(format!(
            "expected {} features per frame, got {}",
            cfg.feature_dim,
            frames.cols()
        )));
    }
    let x = g.input(frames.clone())?;
    let h = conv_subsample(g, ENCODER, x, cfg.conv_channels.len())?;
    let h = linear(g, &format!("{ENCODER}.proj"), h)?;
    let emb_var = match emb {
        EmbeddingInput::None => None,
        EmbeddingInput::Row { table, index } => {
            let t = g.param(table)?;
            Some(g.gather_row(t, index)?)
        }
        EmbeddingInput::Vector(v) => Some(g.input(Tensor::row(v))?),
    };
    if cfg.fusion == Fusion::None && emb_var.is_some() {
        log::debug!("embedding supplied with fusion=none; ignoring it");
    }
    let h = fuse(g, h, emb_var, cfg.fusion, cfg.fusion_weight, cfg.fusion_convex)?;
    let t_out = g.value(h).rows();
    let pos = g.input(sinusoidal_positions(t_out, cfg.width()))?;
    let mut h = g.add(h, pos)?;

    let mut ctc = Vec::with_capacity(cfg.ctc_taps.len() + 1);
    let mut accent = None;
    let last = if opts.accent_only { cfg.accent_tap } else { cfg.layers };
    for l in 1..=last {
        h = transformer_layer(g, &format!("{ENCODER}.layer{l}"), h, cfg.heads, cfg.ln_eps)?.hidden;
        if !opts.accent_only && cfg.ctc_taps.contains(&l) {
            ctc.push(head(g, &tap_head_name(l), h)?);
        }
        if l == cfg.accent_tap {
            if let Some(coeff) = opts.accent_grl {
                let pooled = g.mean_rows(h)?;
                let pooled = g.gradient_reversal(pooled, coeff)?;
                accent = Some(head(g, ACCENT_HEAD, pooled)?);
            }
        }
    }
    if !opts.accent_only {
        ctc.push(head(g, FINAL_CTC_HEAD, h)?);
    }
    Ok(ForwardOutput {
        ctc,
        accent,
        frames: t_out,
    })
}

/// Per-utterance loss nodes.
#[derive(Clone, Debug)]
pub struct UtteranceLosses {
    pub ctc_final: Var,
    pub ctc_taps: Vec<Var>,
    pub accent: Option<Var>,
}

/// CTC loss for every lattice plus the focal/CE accent loss (γ = 0 is CE).
pub fn utterance_losses(
    g: &mut Graph,
    out: &ForwardOutput,
    tokens: &[usize],
    accent_label: usize,
    gamma: f64,
) -> Result<UtteranceLosses> {
    let (last, taps) = out
        .ctc
        .split_last()
        .ok_or_else(|| Error::Contract("forward produced no CTC lattice".into()))?;
    let ctc_final = g.ctc_loss(*last, tokens)?;
    let ctc_taps = taps
        .iter()
        .map(|&lp| g.ctc_loss(lp, tokens))
        .collect::<Result<Vec<_>>>()?;
    let accent = out
        .accent
        .map(|lp| g.class_loss(lp, accent_label, gamma))
        .transpose()?;
    Ok(UtteranceLosses {
        ctc_final,
        ctc_taps,
        accent,
    })
}
