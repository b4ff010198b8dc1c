//! Accent embeddings: a trainable labeled table, embeddings extracted from a
//! pooled accent classifier, z-normalisation, and label corruption.

mod extractor;
mod sampler;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use extractor::{extract_embeddings, Extractor, ExtractorConfig, UtteranceEmbedding};
pub use sampler::{dominant_weights, WeightedSampler};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LabeledTrainable,
    ExtractedFrozen,
}

/// N×D matrix with one row per accent id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    provenance: Provenance,
    normalized: bool,
}

impl EmbeddingTable {
    /// Randomly initialised trainable table with N(0, 1) entries.
    pub fn labeled<R: Rng>(accents: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..accents * dim).map(|_| StandardNormal.sample(rng)).collect();
        EmbeddingTable {
            matrix: Tensor::matrix(accents, dim, data).expect("table shape"),
            provenance: Provenance::LabeledTrainable,
            normalized: false,
        }
    }

    pub fn from_matrix(matrix: Tensor, provenance: Provenance) -> Result<Self> {
        if !matrix.is_matrix() || matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::Dimension(format!(
                "embedding table must be a non-empty matrix, got {:?}",
                matrix.shape()
            )));
        }
        Ok(EmbeddingTable {
            matrix,
            provenance,
            normalized: false,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn accents(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Marks rows built from already-normalised vectors.
    pub fn mark_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    pub fn lookup(&self, accent: usize) -> Result<&[f64]> {
        if accent >= self.accents() {
            return Err(Error::Lookup(accent));
        }
        Ok(self.matrix.row_slice(accent))
    }

    /// Overwrites one row (used to copy the dominant row onto novel accents).
    pub fn set_row(&mut self, accent: usize, values: &[f64]) -> Result<()> {
        if accent >= self.accents() {
            return Err(Error::Lookup(accent));
        }
        if values.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "row of length {} for a table of width {}",
                values.len(),
                self.dim()
            )));
        }
        let d = self.dim();
        self.matrix.data_mut()[accent * d..(accent + 1) * d].copy_from_slice(values);
        Ok(())
    }

    /// Applies frozen statistics to every row.
    pub fn normalize(&mut self, stats: &ZNorm) -> Result<()> {
        let d = self.dim();
        for r in 0..self.accents() {
            stats.apply(&mut self.matrix.data_mut()[r * d..(r + 1) * d])?;
        }
        self.normalized = true;
        Ok(())
    }

    /// Stores the table as a parameter so it trains with the model.
    pub fn install(&self, store: &mut ParamStore, name: &str) {
        store.insert(name, self.matrix.clone());
    }

    pub fn from_store(store: &ParamStore, name: &str, provenance: Provenance) -> Result<Self> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        Self::from_matrix(t.clone(), provenance)
    }

    /// Per-accent mean of utterance embeddings; every accent needs at least one.
    pub fn accent_means(embeddings: &[UtteranceEmbedding], accents: usize) -> Result<Self> {
        let dim = embeddings
            .first()
            .map(|e| e.values.len())
            .ok_or_else(|| Error::Extraction("no utterance embeddings".into()))?;
        let mut sums = vec![0.0; accents * dim];
        let mut counts = vec![0usize; accents];
        for e in embeddings {
            if e.accent >= accents {
                return Err(Error::Lookup(e.accent));
            }
            if e.values.len() != dim {
                return Err(Error::Dimension(format!("embedding {} has width {}", e.id, e.values.len())));
            }
            counts[e.accent] += 1;
            for (s, v) in sums[e.accent * dim..].iter_mut().zip(&e.values) {
                *s += v;
            }
        }
        if let Some(a) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Extraction(format!("accent {a} has no utterances")));
        }
        for (a, &c) in counts.iter().enumerate() {
            for s in &mut sums[a * dim..(a + 1) * dim] {
                *s /= c as f64;
            }
        }
        Self::from_matrix(Tensor::matrix(accents, dim, sums)?, Provenance::ExtractedFrozen)
    }
}

/// Accent id with a flag recording whether corruption replaced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccentLabel {
    pub id: usize,
    pub corrupted: bool,
}

/// Replaces exactly ⌊rate·n⌋ labels, chosen without replacement, with a
/// uniform draw over the other `accents − 1` ids.
///
/// The chosen positions are a prefix of one seeded permutation, so for a
/// fixed RNG state the set corrupted at a lower rate is contained in the set
/// corrupted at any higher rate.
pub fn corrupt_labels<R: Rng>(labels: &[usize], accents: usize, rate: f64, rng: &mut R) -> Result<Vec<AccentLabel>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Contract(format!("corruption rate {rate} outside [0, 1]")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= accents) {
        return Err(Error::Lookup(bad));
    }
    let count = (rate * labels.len() as f64).floor() as usize;
    if count > 0 && accents < 2 {
        return Err(Error::Contract("corruption needs at least two accents".into()));
    }
    let mut out: Vec<AccentLabel> = labels
        .iter()
        .map(|&id| AccentLabel { id, corrupted: false })
        .collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    for &i in &order[..count] {
        let mut other = rng.random_range(0..accents - 1);
        if other >= labels[i] {
            other += 1;
        }
        out[i] = AccentLabel {
            id: other,
            corrupted: true,
        };
    }
    Ok(out)
}

/// Per-dimension mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZNorm {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Extraction("z-normalisation needs at least one vector".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::Dimension(format!("vector of width {} among width {d}", r.len())));
            }
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // A constant dimension is centred but left unscaled.
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ZNorm { mean, std })
    }

    pub fn apply(&self, v: &mut [f64]) -> Result<()> {
        if v.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "vector of width {} for statistics of width {}",
                v.len(),
                self.mean.len()
            )));
        }
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
        Ok(())
    }
}

/// One line of an embedding file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub dim: usize,
    pub values: Vec<f64>,
}

pub fn write_records(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(&r.key, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), n + 1);
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::json(ctx(), e))?;
        if rec.values.len() != rec.dim {
            return Err(Error::Dimension(format!(
                "{}: dim {} but {} values",
                ctx(),
                rec.dim,
                rec.values.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Record key of a per-accent table row.
pub fn accent_key(accent: usize) -> String {
    format!("accent:{accent}")
}

impl EmbeddingTable {
    pub fn to_records(&self) -> Vec<EmbeddingRecord> {
        (0..self.accents())
            .map(|a| EmbeddingRecord {
                key: accent_key(a),
                dim: self.dim(),
                values: self.matrix.row_slice(a).to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: &[EmbeddingRecord], provenance: Provenance) -> Result<Self> {
        let mut rows = Vec::with_capacity(records.len());
        for (a, r) in records.iter().enumerate() {
            if r.key != accent_key(a) {
                return Err(Error::Extraction(format!(
                    "expected key {} at row {a}, found {}",
                    accent_key(a),
                    r.key
                )));
            }
            rows.push(r.values.clone());
        }
        Self::from_matrix(Tensor::from_rows(&rows)?, provenance)
    }
}
