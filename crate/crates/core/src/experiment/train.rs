use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EmbeddingSource, ExperimentConfig, ExtractedMode, NovelStrategy, TrainConfig};
use crate::analysis::RemapTable;
use crate::embeddings::{
    dominant_weights, extract_embeddings, EmbeddingTable, Extractor, Provenance, UtteranceEmbedding, ZNorm,
};
use crate::error::{Error, Result};
use crate::model::{
    forward_full, init_params, utterance_losses, EmbeddingInput, ForwardOptions, Mode, ModelConfig, LABELED_EMBEDDING,
};
use crate::nn::{AdamConfig, AdamState, Grads, Graph, ParamStore, Var};
use crate::synth::{DataSplit, Utterance};

/// Frozen extracted embeddings, z-normalised with training-split statistics.
#[derive(Clone, Debug)]
pub struct ExtractedEmbeddings {
    pub by_id: BTreeMap<String, Vec<f64>>,
    /// Per-accent means of the training utterances; accents without
    /// training data get a random row.
    pub table: EmbeddingTable,
    pub znorm: Option<ZNorm>,
    pub validation_accuracy: Option<f64>,
}

impl ExtractedEmbeddings {
    /// Trains the extractor on the training split and embeds every utterance.
    pub fn build(cfg: &ExperimentConfig, data: &DataSplit) -> Result<Self> {
        let n = cfg.corpus.accents;
        let mut extractor = Extractor::new(cfg.extractor.clone(), cfg.corpus.feature_dim, n)?;
        extractor.pretrain(&data.train)?;
        let weights = dominant_weights(n, data.dominant, &data.seen, cfg.extractor.dominant_weight)?;
        let validation: Vec<Utterance> = data.test.iter().filter(|u| data.seen.contains(&u.accent)).cloned().collect();
        extractor.finetune(&data.train, &weights, &validation)?;
        let train = extract_embeddings(&extractor, &data.train)?;
        let test = extract_embeddings(&extractor, &data.test)?;
        let rows: Vec<&[f64]> = train.iter().map(|e| e.values.as_slice()).collect();
        let znorm = ZNorm::fit(&rows)?;
        let mut all = train;
        all.extend(test);
        for e in &mut all {
            znorm.apply(&mut e.values)?;
        }
        let mut out = Self::from_normalized(&all, data, n, cfg.seed)?;
        out.znorm = Some(znorm);
        out.validation_accuracy = extractor.validation_accuracy;
        Ok(out)
    }

    /// Wraps already-normalised utterance embeddings.
    pub fn from_normalized(embeddings: &[UtteranceEmbedding], data: &DataSplit, accents: usize, seed: u64) -> Result<Self> {
        let dim = embeddings
            .first()
            .map(|e| e.values.len())
            .ok_or_else(|| Error::Extraction("no embeddings".into()))?;
        let by_id: BTreeMap<String, Vec<f64>> = embeddings.iter().map(|e| (e.id.clone(), e.values.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454d_4220);
        let mut table = EmbeddingTable::labeled(accents, dim, &mut rng);
        for &a in &data.seen {
            let members: Vec<&Vec<f64>> = data
                .train
                .iter()
                .filter(|u| u.accent == a)
                .filter_map(|u| by_id.get(&u.id))
                .collect();
            if members.is_empty() {
                return Err(Error::Extraction(format!("accent {a} has no training embeddings")));
            }
            let mean: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|v| v[j]).sum::<f64>() / members.len() as f64)
                .collect();
            table.set_row(a, &mean)?;
        }
        Ok(ExtractedEmbeddings {
            by_id,
            table: EmbeddingTable::from_matrix(table.matrix().clone(), Provenance::ExtractedFrozen)?.mark_normalized(),
            znorm: None,
            validation_accuracy: None,
        })
    }
}

/// Everything besides the parameters that forward passes depend on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extracted: Option<ExtractedEmbeddings>,
    /// Classifier target of each accent id.
    pub targets: Vec<usize>,
    pub accents: usize,
    pub dominant: usize,
    pub seen: BTreeSet<usize>,
    pub novel: BTreeSet<usize>,
}

impl Prepared {
    pub fn new(
        cfg: &ExperimentConfig,
        data: &DataSplit,
        remap: Option<&RemapTable>,
        extracted: Option<ExtractedEmbeddings>,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.corpus.accents;
        let mut model = cfg.model.clone();
        let targets = match remap {
            None => (0..n).collect(),
            Some(r) => {
                let t = (0..n).map(|a| r.group_of(a)).collect::<Result<Vec<_>>>()?;
                model.accents = r.group_count();
                t
            }
        };
        if cfg.train.embedding == EmbeddingSource::Extracted && extracted.is_none() {
            return Err(Error::config("train.embedding", "extracted embeddings were not provided"));
        }
        Ok(Prepared {
            model,
            train: cfg.train.clone(),
            extracted,
            targets,
            accents: n,
            dominant: data.dominant,
            seen: data.seen.clone(),
            novel: data.novel.clone(),
        })
    }

    fn resolve_row(&self, label: usize) -> usize {
        if self.novel.contains(&label) && self.train.novel_strategy == NovelStrategy::DominantAccentRow {
            self.dominant
        } else {
            label
        }
    }

    /// Auxiliary embedding of an utterance presented with accent label `label`.
    pub fn embedding_for<'a>(&'a self, u: &Utterance, label: usize) -> Result<EmbeddingInput<'a>> {
        if label >= self.accents {
            return Err(Error::Lookup(label));
        }
        match self.train.embedding {
            EmbeddingSource::None => Ok(EmbeddingInput::None),
            EmbeddingSource::Labeled => Ok(EmbeddingInput::Row {
                table: LABELED_EMBEDDING,
                index: self.resolve_row(label),
            }),
            EmbeddingSource::Extracted => {
                let ex = self.extracted.as_ref().expect("checked in Prepared::new");
                match self.train.extracted_mode {
                    ExtractedMode::Utterance => ex
                        .by_id
                        .get(&u.id)
                        .map(|v| EmbeddingInput::Vector(v))
                        .ok_or_else(|| Error::Extraction(format!("no embedding for utterance {}", u.id))),
                    ExtractedMode::Accent => Ok(EmbeddingInput::Vector(ex.table.lookup(self.resolve_row(label))?)),
                }
            }
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = init_params(&self.model, &mut rng)?;
        if self.train.embedding == EmbeddingSource::Labeled {
            EmbeddingTable::labeled(self.accents, self.model.emb_dim, &mut rng).install(&mut store, LABELED_EMBEDDING);
        }
        Ok(store)
    }
}

/// Loss components of one optimisation step (batch means).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub ctc: f64,
    /// Sum over taps of the intermediate CTC losses.
    pub ctc_taps: f64,
    pub accent: f64,
    /// Accent loss on detached features during warmup (not part of `total`).
    pub accent_warmup: f64,
    pub lambda: f64,
    pub beta: f64,
    /// `ctc + lambda·ctc_taps + beta·accent`, as computed by the graph.
    pub total: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Forward/backward for one batch at a 1-based epoch.
pub fn batch_step(prep: &Prepared, store: &ParamStore, batch: &[&Utterance], epoch: usize) -> Result<(StepRecord, Grads, usize)> {
    let t = &prep.train;
    let beta_t = t.beta_at(epoch);
    let active = beta_t > 0.0;
    let warm = !active && t.mode != Mode::Baseline && t.accent_warmup;
    let accent_grl = match t.mode.grl_coeff() {
        None => None,
        Some(c) if active => Some(c),
        Some(_) if warm => Some(0.0),
        Some(_) => None,
    };
    let opts = ForwardOptions {
        accent_grl,
        accent_only: false,
    };
    let mut g = Graph::new(store);
    let mut objectives = Vec::with_capacity(batch.len());
    let mut warm_terms: Vec<Var> = Vec::new();
    let (mut ctc, mut taps, mut acc, mut warm_vals) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for u in batch {
        let emb = prep.embedding_for(u, u.accent)?;
        let out = forward_full(&mut g, &prep.model, &u.frames, emb, opts)?;
        let target = prep.targets[u.accent];
        let l = utterance_losses(&mut g, &out, &u.tokens, target, t.focal_gamma())?;
        ctc.push(g.value(l.ctc_final).item());
        taps.push(l.ctc_taps.iter().map(|&v| g.value(v).item()).sum::<f64>());
        let mut terms = vec![(l.ctc_final, 1.0)];
        terms.extend(l.ctc_taps.iter().map(|&v| (v, t.lambda)));
        if let Some(a) = l.accent {
            let v = g.value(a).item();
            if active {
                acc.push(v);
                terms.push((a, beta_t));
            } else {
                warm_vals.push(v);
                warm_terms.push(a);
            }
        }
        objectives.push(g.weighted_sum(&terms)?);
    }
    let objective = g.mean_of(&objectives)?;
    let root = if warm_terms.is_empty() {
        objective
    } else {
        let w = g.mean_of(&warm_terms)?;
        g.add(objective, w)?
    };
    let record = StepRecord {
        epoch,
        step: 0,
        ctc: mean(&ctc),
        ctc_taps: mean(&taps),
        accent: mean(&acc),
        accent_warmup: mean(&warm_vals),
        lambda: t.lambda,
        beta: beta_t,
        total: g.value(objective).item(),
    };
    let grads = g.backward(root)?;
    Ok((record, grads, g.clamp_events()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub ctc: f64,
    pub ctc_taps: f64,
    pub accent: f64,
    pub accent_warmup: f64,
    pub total: f64,
    pub probe_accuracy: Option<f64>,
    pub clamp_events: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub prep: Prepared,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(d) => Error::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in {d}"),
        },
        other => other,
    }
}

/// Utterances used to probe the accent head: test data of accents seen in training.
pub fn probe_set(data: &DataSplit) -> Vec<Utterance> {
    data.test.iter().filter(|u| data.seen.contains(&u.accent)).cloned().collect()
}

/// Runs the full training schedule.
pub fn train(prep: Prepared, seed: u64, train_set: &[Utterance], probe: &[Utterance]) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let t = prep.train.clone();
    let mut store = prep.init_params(seed)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: t.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut steps = Vec::new();
    let mut annealed = false;
    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let lr = adam.lr();
        let first = steps.len();
        let mut clamps = 0;
        for (k, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut rec, grads, c) = batch_step(&prep, &store, &batch, epoch).map_err(|e| diverged(epoch, k, e))?;
            if !rec.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: k,
                    detail: format!("loss {}", rec.total),
                });
            }
            rec.step = k;
            clamps += c;
            adam.step(&mut store, &grads).map_err(|e| diverged(epoch, k, e))?;
            steps.push(rec);
        }
        let recs = &steps[first..];
        let avg = |f: fn(&StepRecord) -> f64| mean(&recs.iter().map(f).collect::<Vec<_>>());
        let model = TrainedModel {
            prep: prep.clone(),
            params: store,
        };
        let probe_accuracy = if t.mode != Mode::Baseline && !probe.is_empty() {
            Some(probe_accent_accuracy(&model, probe)?)
        } else {
            None
        };
        store = model.params;
        let record = EpochRecord {
            epoch,
            lr,
            beta: t.beta_at(epoch),
            ctc: avg(|r| r.ctc),
            ctc_taps: avg(|r| r.ctc_taps),
            accent: avg(|r| r.accent),
            accent_warmup: avg(|r| r.accent_warmup),
            total: avg(|r| r.total),
            probe_accuracy,
            clamp_events: clamps,
        };
        log::info!(
            "epoch {epoch}: total {:.4} ctc {:.4} accent {:.4} probe {:?}",
            record.total,
            record.ctc,
            record.accent,
            record.probe_accuracy
        );
        epochs.push(record);
        if epoch >= t.anneal_epoch() && (t.anneal_per_epoch || !annealed) {
            adam.anneal(t.anneal_factor);
            annealed = true;
        }
    }
    Ok(TrainOutcome {
        model: TrainedModel { prep, params: store },
        epochs,
        steps,
    })
}

/// Accent-head accuracy against classifier targets.
pub fn probe_accent_accuracy(model: &TrainedModel, utts: &[Utterance]) -> Result<f64> {
    if model.prep.train.mode == Mode::Baseline {
        return Err(Error::Contract("the baseline model has no accent head".into()));
    }
    if utts.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    let opts = ForwardOptions {
        accent_grl: Some(1.0),
        accent_only: true,
    };
    let mut correct = 0;
    for u in utts {
        let mut g = Graph::new(&model.params);
        let emb = model.prep.embedding_for(u, u.accent)?;
        let out = forward_full(&mut g, &model.prep.model, &u.frames, emb, opts)?;
        let lp = out.accent.expect("accent branch requested");
        if crate::ctc::argmax(g.value(lp).data()) == model.prep.targets[u.accent] {
            correct += 1;
        }
    }
    Ok(correct as f64 / utts.len() as f64)
}
