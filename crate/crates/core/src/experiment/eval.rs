use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::TrainedModel;
use crate::ctc::{argmax, collapse, edit_distance};
use crate::embeddings::corrupt_labels;
use crate::error::{Error, Result};
use crate::model::{forward_full, ForwardOptions};
use crate::nn::Graph;
use crate::synth::Utterance;

/// WER (fraction) per accent and per accent group. Group values are the
/// unweighted mean of the per-accent WERs in the group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerTable {
    pub per_accent: BTreeMap<usize, f64>,
    pub dominant: Option<f64>,
    pub non_dominant: Option<f64>,
    pub novel: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub corruption_rate: f64,
    /// Seeds the label corruption.
    pub seed: u64,
}

/// Greedy best-path transcript of one utterance.
pub fn decode(model: &TrainedModel, u: &Utterance, label: usize) -> Result<Vec<usize>> {
    let mut g = Graph::new(&model.params);
    let emb = model.prep.embedding_for(u, label)?;
    let opts = ForwardOptions {
        accent_grl: None,
        accent_only: false,
    };
    let out = forward_full(&mut g, &model.prep.model, &u.frames, emb, opts)?;
    let lp = g.value(out.final_ctc().expect("final head"));
    let path: Vec<usize> = (0..lp.rows()).map(|r| argmax(lp.row_slice(r))).collect();
    Ok(collapse(&path))
}

fn group_mean(per_accent: &BTreeMap<usize, f64>, members: &BTreeSet<usize>) -> Option<f64> {
    let vals: Vec<f64> = per_accent
        .iter()
        .filter(|(a, _)| members.contains(a))
        .map(|(_, &w)| w)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Decodes every test utterance (with possibly corrupted accent labels) and
/// tabulates WER by accent and group.
pub fn evaluate(model: &TrainedModel, test: &[Utterance], opts: EvalOptions) -> Result<WerTable> {
    let prep = &model.prep;
    let labels: Vec<usize> = test.iter().map(|u| u.accent).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let presented = corrupt_labels(&labels, prep.accents, opts.corruption_rate, &mut rng)?;
    let mut errors: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (u, label) in test.iter().zip(&presented) {
        let hyp = decode(model, u, label.id)?;
        let e = errors.entry(u.accent).or_default();
        e.0 += edit_distance(&u.tokens, &hyp);
        e.1 += u.tokens.len();
    }
    let mut per_accent = BTreeMap::new();
    for (a, (dist, len)) in errors {
        if len == 0 {
            return Err(Error::UndefinedWer);
        }
        per_accent.insert(a, dist as f64 / len as f64);
    }
    let dominant: BTreeSet<usize> = [prep.dominant].into_iter().collect();
    // Every non-dominant test accent that is not held out as novel, whether
    // or not training saw it (the dominant-only model sees none of them).
    let non_dominant: BTreeSet<usize> = per_accent
        .keys()
        .copied()
        .filter(|a| *a != prep.dominant && !prep.novel.contains(a))
        .collect();
    if test.is_empty() {
        log::warn!("empty test set; WER table has gaps");
    }
    Ok(WerTable {
        dominant: group_mean(&per_accent, &dominant),
        non_dominant: group_mean(&per_accent, &non_dominant),
        novel: group_mean(&per_accent, &prep.novel),
        per_accent,
    })
}
