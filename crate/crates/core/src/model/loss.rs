//! Cross-entropy and focal losses for the accent classifier.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Floor applied to the target-class probability.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of probabilities clamped at [`PROB_FLOOR`].
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalKernel {
    pub loss: f64,
    /// Derivative of the loss w.r.t. the target log-probability.
    pub dloss_dlp: f64,
    pub clamped: bool,
}

/// `−(1−p)^γ · log p` evaluated from `log p`, with its derivative.
pub fn focal_from_log_prob(log_p: f64, gamma: f64) -> FocalKernel {
    let floor = PROB_FLOOR.ln();
    if log_p < floor {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        log::warn!("accent probability {} clamped to {PROB_FLOOR}", log_p.exp());
        let q = -floor.exp_m1();
        return FocalKernel {
            loss: -q.powf(gamma) * floor,
            dloss_dlp: 0.0,
            clamped: true,
        };
    }
    let p = log_p.exp();
    // 1 − p without cancellation near p = 1.
    let q = -log_p.exp_m1();
    let weight = q.powf(gamma);
    let loss = -weight * log_p;
    let focus = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p * log_p
    };
    FocalKernel {
        loss,
        dloss_dlp: focus - weight,
        clamped: false,
    }
}

fn target_prob(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::Dimension(format!("label {label} for {} classes", probs.len()))
    })?;
    if !(0.0..=1.0 + 1e-9).contains(&p) {
        return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
    }
    Ok(p.min(1.0))
}

/// `−log P(y)`.
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    focal_loss(probs, label, 0.0)
}

/// `−(1 − P(y))^γ · log P(y)`; reduces to [`ce_loss`] at γ = 0.
pub fn focal_loss(probs: &[f64], label: usize, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::Parameter(format!("focal γ must be ≥ 0, got {gamma}")));
    }
    let p = target_prob(probs, label)?;
    let log_p = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    Ok(focal_from_log_prob(log_p, gamma).loss)
}

/// Mean of per-example losses.
pub fn mean_loss(
    batch: &[(Vec<f64>, usize)],
    f: impl Fn(&[f64], usize) -> Result<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let total = batch
        .iter()
        .map(|(p, y)| f(p, *y))
        .sum::<Result<f64>>()?;
    Ok(total / batch.len() as f64)
}
