//! Training driver: configuration, the two-phase training loop, evaluation,
//! corrupted-label ablations, analysis runs and report files.

mod analyze;
mod config;
mod eval;
mod report;
mod train;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use analyze::{run_analysis, write_analysis_outputs, write_extract_outputs, AnalysisReport, AnalysisRun};
pub use config::{
    AblationConfig, AccentLoss, AnalysisConfig, EmbeddingSource, ExperimentConfig, ExtractedMode, NovelStrategy,
    TrainConfig, SCHEMA_VERSION,
};
pub use eval::{decode, evaluate, EvalOptions, WerTable};
pub use report::{from_csv, to_csv, to_markdown, ReportRow, CSV_HEADER};
pub use train::{
    batch_step, probe_accent_accuracy, probe_set, train, EpochRecord, ExtractedEmbeddings, Prepared, StepRecord,
    TrainOutcome, TrainedModel,
};

use crate::analysis::RemapTable;
use crate::embeddings::{read_records, UtteranceEmbedding};
use crate::error::{Error, Result};
use crate::synth::{self, Corpus, DataSplit, Utterance};

/// Seed stream for inference-time label corruption.
const CORRUPTION_STREAM: u64 = 0xC0_22_7E;

/// Hex SHA-256 of the canonical TOML rendering of a config.
pub fn fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_toml()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Utterances from `train.corpus_path` if set, else generated from `corpus`.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<Utterance>> {
    match &cfg.train.corpus_path {
        Some(p) => synth::read_utterances(p),
        None => Ok(Corpus::generate(&cfg.corpus)?.utterances),
    }
}

pub fn data_split(cfg: &ExperimentConfig, utterances: &[Utterance]) -> Result<DataSplit> {
    let data = synth::split_utterances(utterances, &cfg.corpus, cfg.train.split)?;
    Ok(if cfg.train.dominant_only { data.dominant_only() } else { data })
}

/// Short model label such as `dat+labeled` or `baseline (dominant only)`.
pub fn run_name(cfg: &ExperimentConfig) -> String {
    let mut name = cfg.train.mode.as_str().to_string();
    match cfg.train.embedding {
        EmbeddingSource::None => {}
        EmbeddingSource::Labeled => name.push_str("+labeled"),
        EmbeddingSource::Extracted => name.push_str("+extracted"),
    }
    if cfg.train.dominant_only {
        name.push_str(" (dominant only)");
    }
    name
}

fn load_remap(cfg: &ExperimentConfig) -> Result<Option<RemapTable>> {
    let Some(p) = &cfg.train.remap_path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::json(p.display().to_string(), e))
}

/// Embeddings from `train.embeddings_path` if set, else a freshly trained extractor.
pub fn extracted_embeddings(cfg: &ExperimentConfig, data: &DataSplit) -> Result<ExtractedEmbeddings> {
    let Some(p) = &cfg.train.embeddings_path else {
        return ExtractedEmbeddings::build(cfg, data);
    };
    let accent_of: BTreeMap<&str, usize> = data
        .train
        .iter()
        .chain(&data.test)
        .map(|u| (u.id.as_str(), u.accent))
        .collect();
    let embeddings = read_records(p)?
        .into_iter()
        .filter_map(|r| {
            accent_of.get(r.key.as_str()).map(|&accent| UtteranceEmbedding {
                id: r.key,
                accent,
                values: r.values,
            })
        })
        .collect::<Vec<_>>();
    ExtractedEmbeddings::from_normalized(&embeddings, data, cfg.corpus.accents, cfg.seed)
}

fn load_extracted(cfg: &ExperimentConfig, data: &DataSplit) -> Result<Option<ExtractedEmbeddings>> {
    if cfg.train.embedding != EmbeddingSource::Extracted {
        return Ok(None);
    }
    extracted_embeddings(cfg, data).map(Some)
}

/// Prepares data and embeddings, then trains.
pub fn fit(cfg: &ExperimentConfig, utterances: &[Utterance]) -> Result<(TrainOutcome, DataSplit)> {
    cfg.validate()?;
    let data = data_split(cfg, utterances)?;
    let remap = load_remap(cfg)?;
    let extracted = load_extracted(cfg, &data)?;
    let prep = Prepared::new(cfg, &data, remap.as_ref(), extracted)?;
    let outcome = train(prep, cfg.seed, &data.train, &probe_set(&data))?;
    Ok((outcome, data))
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub name: String,
    pub fingerprint: String,
    pub outcome: TrainOutcome,
    pub data: DataSplit,
    pub wer: WerTable,
}

impl TrainRun {
    pub fn row(&self) -> ReportRow {
        ReportRow::from_table(&self.name, self.data.mode.as_str(), &self.wer)
    }

    pub fn final_probe_accuracy(&self) -> Option<f64> {
        self.outcome.epochs.last().and_then(|e| e.probe_accuracy)
    }
}

/// Trains and evaluates one configuration.
pub fn run_train(cfg: &ExperimentConfig, utterances: &[Utterance]) -> Result<TrainRun> {
    let (outcome, data) = fit(cfg, utterances)?;
    let opts = EvalOptions {
        corruption_rate: cfg.train.corruption_rate,
        seed: cfg.seed ^ CORRUPTION_STREAM,
    };
    let wer = evaluate(&outcome.model, &data.test, opts)?;
    Ok(TrainRun {
        name: run_name(cfg),
        fingerprint: fingerprint(cfg)?,
        outcome,
        data,
        wer,
    })
}

/// Machine-readable summary written next to the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub fingerprint: String,
    pub rows: Vec<ReportRow>,
    pub wer: Vec<WerTable>,
}

impl ReportFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `report.md` and `report.json` into `dir`.
pub fn write_report(dir: &Path, title: &str, report: &ReportFile) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("report.csv"), &to_csv(&report.rows)?)?;
    write_text(&dir.join("report.md"), &to_markdown(title, &report.rows))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))?;
    write_text(&dir.join("report.json"), &(json + "\n"))
}

/// Writes reports, `trace.jsonl` and `checkpoint.json` for a training run.
pub fn write_train_outputs(dir: &Path, run: &TrainRun) -> Result<()> {
    let report = ReportFile {
        fingerprint: run.fingerprint.clone(),
        rows: vec![run.row()],
        wer: vec![run.wer.clone()],
    };
    write_report(dir, "Training report", &report)?;
    let path = dir.join("trace.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in &run.outcome.epochs {
        let line = serde_json::to_string(e).map_err(|err| Error::json("trace", err))?;
        writeln!(w, "{line}").map_err(|err| Error::io(&path, err))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    run.outcome.model.params.save(&dir.join("checkpoint.json"))
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub fingerprint: String,
    pub rows: Vec<ReportRow>,
    /// (rate, strategy, table) per evaluated setting.
    pub tables: Vec<(f64, NovelStrategy, WerTable)>,
}

/// Trains once with labeled embeddings, then evaluates with test labels
/// corrupted at each rate (and with both novel-accent strategies when the
/// split has novel accents).
pub fn run_ablation(cfg: &ExperimentConfig, utterances: &[Utterance], rates: &[f64]) -> Result<AblationRun> {
    if cfg.train.embedding != EmbeddingSource::Labeled {
        return Err(Error::config("train.embedding", "the ablation needs labeled embeddings"));
    }
    let (outcome, data) = fit(cfg, utterances)?;
    let strategies: &[NovelStrategy] = if data.novel.is_empty() {
        &[NovelStrategy::UntrainedRow]
    } else {
        &[NovelStrategy::UntrainedRow, NovelStrategy::DominantAccentRow]
    };
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    for &rate in rates {
        for &strategy in strategies {
            let mut model = outcome.model.clone();
            model.prep.train.novel_strategy = strategy;
            let opts = EvalOptions {
                corruption_rate: rate,
                seed: cfg.seed ^ CORRUPTION_STREAM,
            };
            let wer = evaluate(&model, &data.test, opts)?;
            let mut name = format!("{}% corrupted", (rate * 100.0).round());
            if strategies.len() > 1 {
                name.push_str(match strategy {
                    NovelStrategy::UntrainedRow => " (untrained novel rows)",
                    NovelStrategy::DominantAccentRow => " (dominant row for novel)",
                });
            }
            rows.push(ReportRow::from_table(name, data.mode.as_str(), &wer));
            tables.push((rate, strategy, wer));
        }
    }
    Ok(AblationRun {
        fingerprint: fingerprint(cfg)?,
        rows,
        tables,
    })
}
