use rand::Rng;

use super::config::Fusion;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};

pub(crate) const CONV_KERNEL: usize = 3;

pub(crate) fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert_uniform(format!("{prefix}.w"), fan_in, fan_out, rng);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[1, width], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, width]));
}

pub(crate) fn init_transformer_layer<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    ffn: usize,
    rng: &mut R,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), width);
    init_linear(store, &format!("{prefix}.attn.qkv"), width, 3 * width, rng);
    init_linear(store, &format!("{prefix}.attn.out"), width, width, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), width);
    init_linear(store, &format!("{prefix}.ffn.up"), width, ffn, rng);
    init_linear(store, &format!("{prefix}.ffn.down"), ffn, width, rng);
}

/// `x·W + b` with parameters `{prefix}.w`, `{prefix}.b`.
pub fn linear(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// Conv stages over time: kernel 3 ("same" padding), ReLU, max-pool 2.
/// [T×F] → [⌊T/2^stages⌋ × C_last].
pub fn conv_subsample(g: &mut Graph, prefix: &str, x: Var, stages: usize) -> Result<Var> {
    let frames = g.value(x).rows();
    let factor = 1usize << stages;
    if frames < factor {
        return Err(Error::Dimension(format!(
            "{frames} frames cannot be downsampled by {factor}"
        )));
    }
    let mut h = x;
    for s in 0..stages {
        let ctx = g.context_stack(h, CONV_KERNEL)?;
        let y = linear(g, &format!("{prefix}.conv{s}"), ctx)?;
        let y = g.relu(y)?;
        h = g.max_pool_rows(y)?;
    }
    Ok(h)
}

/// Joins an utterance-level embedding row (1×D) with frame features (T×M).
pub fn fuse(g: &mut Graph, hidden: Var, emb: Option<Var>, mode: Fusion, weight: f64, convex: bool) -> Result<Var> {
    let (frames, m) = (g.value(hidden).rows(), g.value(hidden).cols());
    let emb = match (mode, emb) {
        (Fusion::None, _) => return Ok(hidden),
        (_, None) => {
            return Err(Error::config(
                "model.fusion",
                "an embedding is required when fusion is enabled",
            ))
        }
        (_, Some(e)) => e,
    };
    let d = g.value(emb).cols();
    let tiled = g.broadcast_rows(emb, frames)?;
    match mode {
        Fusion::Concat => g.concat_cols(hidden, tiled),
        Fusion::WeightedSum => {
            if d != m {
                return Err(Error::Dimension(format!(
                    "weighted_sum fusion needs D = M (D={d}, M={m})"
                )));
            }
            let e = g.scale(tiled, weight)?;
            let h = if convex { g.scale(hidden, 1.0 - weight)? } else { hidden };
            g.add(h, e)
        }
        Fusion::None => unreachable!(),
    }
}

pub fn sinusoidal_positions(frames: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; frames * width];
    for t in 0..frames {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(frames, width, data).expect("positions shape")
}

pub struct LayerOutput {
    pub hidden: Var,
    /// Per-head attention weights (T×T, rows sum to 1).
    pub attention: Vec<Var>,
}

/// Pre-norm transformer layer: `h + MHA(LN(h))`, then `h + FFN(LN(h))`.
pub fn transformer_layer(g: &mut Graph, prefix: &str, h: Var, heads: usize, eps: f64) -> Result<LayerOutput> {
    let width = g.value(h).cols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::config(
            "model.heads",
            format!("width {width} is not divisible by {heads} heads"),
        ));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let x = layer_norm(g, &format!("{prefix}.ln1"), h, eps)?;
    let qkv = linear(g, &format!("{prefix}.attn.qkv"), x)?;
    let mut attention = Vec::with_capacity(heads);
    let mut merged: Option<Var> = None;
    for i in 0..heads {
        let q = g.slice_cols(qkv, i * dh, (i + 1) * dh)?;
        let k = g.slice_cols(qkv, width + i * dh, width + (i + 1) * dh)?;
        let v = g.slice_cols(qkv, 2 * width + i * dh, 2 * width + (i + 1) * dh)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores)?;
        attention.push(weights);
        let ctx = g.matmul(weights, v)?;
        merged = Some(match merged {
            None => ctx,
            Some(m) => g.concat_cols(m, ctx)?,
        });
    }
    let merged = merged.expect("at least one head");
    let attn_out = linear(g, &format!("{prefix}.attn.out"), merged)?;
    let h = g.add(h, attn_out)?;

    let x = layer_norm(g, &format!("{prefix}.ln2"), h, eps)?;
    let up = linear(g, &format!("{prefix}.ffn.up"), x)?;
    let up = g.relu(up)?;
    let down = linear(g, &format!("{prefix}.ffn.down"), up)?;
    let hidden = g.add(h, down)?;
    Ok(LayerOutput { hidden, attention })
}

/// Classifier head: linear → ReLU → linear → log-softmax.
pub fn head(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.hidden"), x)?;
    let h = g.relu(h)?;
    let o = linear(g, &format!("{prefix}.out"), h)?;
    g.log_softmax(o)
}

pub(crate) fn init_head<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, hidden: usize, out: usize, rng: &mut R) {
    init_linear(store, &format!("{prefix}.hidden"), width, hidden, rng);
    init_linear(store, &format!("{prefix}.out"), hidden, out, rng);
}
