use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::ExtractedEmbeddings;
use crate::analysis::{adjusted_rand_index, knn_purity, remap_accents, tsne, GroupSpec, Lda, RemapTable};
use crate::embeddings::{write_records, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::synth::DataSplit;

const PURITY_K: usize = 5;

/// Cluster metrics written as `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub fingerprint: String,
    pub lda_dim: usize,
    pub lda_eigenvalues: Vec<f64>,
    /// ARI of the remap grouping against the generator's regions.
    pub region_ari: f64,
    /// 5-NN label purity of the 2-D map.
    pub accent_purity: f64,
    pub region_purity: f64,
    pub points: usize,
}

#[derive(Clone, Debug)]
pub struct AnalysisRun {
    pub report: AnalysisReport,
    pub remap: RemapTable,
    /// (id, accent, x, y) per mapped utterance.
    pub coords: Vec<(String, usize, [f64; 2])>,
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

/// LDA on the training embeddings of seen accents, k-means remap of the
/// projected accent centroids (novel accents placed by their test
/// centroids), and t-SNE of a per-accent sample of the test embeddings.
pub fn run_analysis(cfg: &ExperimentConfig, data: &DataSplit, emb: &ExtractedEmbeddings) -> Result<AnalysisRun> {
    let a = &cfg.analysis;
    let lookup = |id: &str| {
        emb.by_id
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Extraction(format!("no embedding for utterance {id}")))
    };
    let (mut points, mut labels) = (Vec::new(), Vec::new());
    for u in &data.train {
        points.push(lookup(&u.id)?);
        labels.push(u.accent);
    }
    let lda = Lda::fit(&points, &labels, a.lda_dim)?;

    let mut by_accent: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (p, &l) in points.iter().zip(&labels) {
        by_accent.entry(l).or_default().push(lda.transform(p)?);
    }
    let mut novel_rows: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for u in data.test.iter().filter(|u| data.novel.contains(&u.accent)) {
        novel_rows.entry(u.accent).or_default().push(lda.transform(&lookup(&u.id)?)?);
    }
    let centroids: BTreeMap<usize, Vec<f64>> = by_accent.iter().map(|(&k, v)| (k, mean(v))).collect();
    let novel: BTreeMap<usize, Vec<f64>> = novel_rows.iter().map(|(&k, v)| (k, mean(v))).collect();
    let remap = remap_accents(&centroids, &GroupSpec::Count(a.groups), &a.overrides, &novel, cfg.seed)?;

    let accents: Vec<usize> = remap.assignment.keys().copied().collect();
    let found: Vec<usize> = accents.iter().map(|&k| remap.assignment[&k]).collect();
    let truth: Vec<usize> = accents.iter().map(|&k| cfg.corpus.regions[k]).collect();
    let region_ari = adjusted_rand_index(&truth, &found)?;

    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut sample = Vec::new();
    for u in &data.test {
        let n = taken.entry(u.accent).or_default();
        if a.tsne_per_accent == 0 || *n < a.tsne_per_accent {
            *n += 1;
            sample.push((u.id.clone(), u.accent, lda.transform(&lookup(&u.id)?)?));
        }
    }
    let reduced: Vec<Vec<f64>> = sample.iter().map(|s| s.2.clone()).collect();
    let xy = tsne(&reduced, &a.tsne)?;
    let accent_labels: Vec<usize> = sample.iter().map(|s| s.1).collect();
    let region_labels: Vec<usize> = accent_labels.iter().map(|&k| cfg.corpus.regions[k]).collect();
    let report = AnalysisReport {
        fingerprint: super::fingerprint(cfg)?,
        lda_dim: a.lda_dim,
        lda_eigenvalues: lda.eigenvalues.clone(),
        region_ari,
        accent_purity: knn_purity(&xy, &accent_labels, PURITY_K)?,
        region_purity: knn_purity(&xy, &region_labels, PURITY_K)?,
        points: xy.len(),
    };
    let coords = sample.into_iter().zip(xy).map(|((id, acc, _), p)| (id, acc, p)).collect();
    Ok(AnalysisRun { report, remap, coords })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `coords.csv`, `remap.json` and `metrics.json`.
pub fn write_analysis_outputs(dir: &Path, run: &AnalysisRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("coords.csv"))?;
    w.write_record(["id", "accent", "x", "y"])?;
    for (id, accent, p) in &run.coords {
        w.write_record([id.clone(), accent.to_string(), p[0].to_string(), p[1].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("coords.csv"), e))?;
    write_json(&dir.join("remap.json"), &run.remap)?;
    write_json(&dir.join("metrics.json"), &run.report)
}

#[derive(Serialize)]
struct ExtractSummary<'a> {
    fingerprint: &'a str,
    utterances: usize,
    dim: usize,
    validation_accuracy: Option<f64>,
    znorm: Option<&'a crate::embeddings::ZNorm>,
}

/// Writes `embeddings.jsonl` (z-normalised, keyed by utterance id),
/// `accent_table.jsonl` and `summary.json`.
pub fn write_extract_outputs(dir: &Path, fingerprint: &str, emb: &ExtractedEmbeddings) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<EmbeddingRecord> = emb
        .by_id
        .iter()
        .map(|(id, v)| EmbeddingRecord {
            key: id.clone(),
            dim: v.len(),
            values: v.clone(),
        })
        .collect();
    write_records(&dir.join("embeddings.jsonl"), &records)?;
    write_records(&dir.join("accent_table.jsonl"), &emb.table.to_records())?;
    write_json(
        &dir.join("summary.json"),
        &ExtractSummary {
            fingerprint,
            utterances: records.len(),
            dim: emb.table.dim(),
            validation_accuracy: emb.validation_accuracy,
            znorm: emb.znorm.as_ref(),
        },
    )
}
