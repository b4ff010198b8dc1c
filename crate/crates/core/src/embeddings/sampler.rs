use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// Draws a class by weight, then a member of that class uniformly.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    classes: Vec<usize>,
    index: WeightedIndex<f64>,
    members: Vec<Vec<usize>>,
}

impl WeightedSampler {
    /// `weights[c]` is the draw probability of class `c`; `labels[i]` is the class of item `i`.
    pub fn new(weights: &[f64], labels: &[usize]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Sampler("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Sampler(format!("weights sum to {total}, expected 1")));
        }
        let mut by_class = vec![Vec::new(); weights.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_class
                .get_mut(l)
                .ok_or_else(|| Error::Sampler(format!("label {l} has no weight")))?
                .push(i);
        }
        let mut classes = Vec::new();
        let mut active = Vec::new();
        let mut members = Vec::new();
        for (c, (&w, m)) in weights.iter().zip(by_class).enumerate() {
            if w == 0.0 {
                continue;
            }
            if m.is_empty() {
                return Err(Error::Sampler(format!("class {c} has weight {w} but no items")));
            }
            classes.push(c);
            active.push(w);
            members.push(m);
        }
        let index = WeightedIndex::new(&active).map_err(|e| Error::Sampler(e.to_string()))?;
        Ok(WeightedSampler {
            classes,
            index,
            members,
        })
    }

    /// Returns an item index.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let k = self.index.sample(rng);
        let m = &self.members[k];
        m[rng.random_range(0..m.len())]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

/// Dominant class gets `dominant_weight`; the other present classes share the rest.
pub fn dominant_weights(accents: usize, dominant: usize, present: &BTreeSet<usize>, dominant_weight: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&dominant_weight) {
        return Err(Error::Sampler(format!("dominant weight {dominant_weight} outside [0, 1]")));
    }
    let others: Vec<usize> = present.iter().copied().filter(|&a| a != dominant).collect();
    let mut w = vec![0.0; accents];
    if let Some(&bad) = present.iter().find(|&&a| a >= accents) {
        return Err(Error::Sampler(format!("accent {bad} out of range")));
    }
    if others.is_empty() {
        w[dominant] = 1.0;
        return Ok(w);
    }
    if present.contains(&dominant) {
        w[dominant] = dominant_weight;
    }
    let rest = (1.0 - w[dominant]) / others.len() as f64;
    for a in others {
        w[a] = rest;
    }
    Ok(w)
}
