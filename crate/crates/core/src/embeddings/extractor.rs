//! Small frame encoder pretrained by masked-frame reconstruction, then
//! fine-tuned as a mean-pooled accent classifier whose pooled hidden vector
//! serves as the utterance embedding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::WeightedSampler;
use crate::error::{Error, Result};
use crate::model::layers::linear;
use crate::nn::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::synth::Utterance;

const CONTEXT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub hidden: usize,
    /// Embedding width D.
    pub dim: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub lr: f64,
    pub dominant_weight: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            hidden: 32,
            dim: 8,
            pretrain_epochs: 2,
            finetune_epochs: 4,
            batch_size: 8,
            mask_prob: 0.15,
            lr: 0.003,
            dominant_weight: 0.1,
            seed: 11,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("extractor.{f}"), m));
        if self.hidden == 0 || self.dim == 0 {
            return bad("dim", "widths must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad("mask_prob", "must lie in [0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub feature_dim: usize,
    pub accents: usize,
    pub params: ParamStore,
    /// Mean reconstruction loss per pretraining epoch.
    pub pretrain_loss: Vec<f64>,
    /// Mean classification loss per fine-tuning epoch.
    pub finetune_loss: Vec<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding {
    pub id: String,
    pub accent: usize,
    pub values: Vec<f64>,
}

fn encode(g: &mut Graph, frames: Var) -> Result<Var> {
    let ctx = g.context_stack(frames, CONTEXT)?;
    let h = linear(g, "ext.enc.in", ctx)?;
    let h = g.relu(h)?;
    linear(g, "ext.enc.out", h)
}

fn check_features(utts: &[Utterance], f: usize) -> Result<()> {
    match utts.iter().find(|u| u.frames.cols() != f) {
        Some(u) => Err(Error::Dimension(format!(
            "utterance {} has {} features, expected {f}",
            u.id,
            u.frames.cols()
        ))),
        None => Ok(()),
    }
}

impl Extractor {
    pub fn new(config: ExtractorConfig, feature_dim: usize, accents: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (h, d) = (config.hidden, config.dim);
        crate::model::layers::init_linear(&mut params, "ext.enc.in", CONTEXT * feature_dim, h, &mut rng);
        crate::model::layers::init_linear(&mut params, "ext.enc.out", h, d, &mut rng);
        crate::model::layers::init_linear(&mut params, "ext.recon", d, feature_dim, &mut rng);
        crate::model::layers::init_linear(&mut params, "ext.cls", d, accents, &mut rng);
        Ok(Extractor {
            config,
            feature_dim,
            accents,
            params,
            pretrain_loss: Vec::new(),
            finetune_loss: Vec::new(),
            validation_accuracy: None,
        })
    }

    /// Masked-frame reconstruction: masked rows are zeroed in the input and
    /// the squared error is averaged over masked rows only.
    pub fn pretrain(&mut self, train: &[Utterance]) -> Result<()> {
        check_features(train, self.feature_dim)?;
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554);
        let mut adam = AdamState::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        })?;
        let f = self.feature_dim;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let mut g = Graph::new(&self.params);
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let x = &train[i].frames;
                    let t = x.rows();
                    let mut masked: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < cfg.mask_prob).collect();
                    if !masked.iter().any(|&m| m) {
                        let k = rng.random_range(0..t);
                        masked[k] = true;
                    }
                    let mut input = x.clone();
                    let mut mask = Tensor::zeros(&[t, f]);
                    for (r, &m) in masked.iter().enumerate() {
                        if m {
                            input.data_mut()[r * f..(r + 1) * f].iter_mut().for_each(|v| *v = 0.0);
                            mask.data_mut()[r * f..(r + 1) * f].iter_mut().for_each(|v| *v = 1.0);
                        }
                    }
                    let n_masked = masked.iter().filter(|&&m| m).count();
                    let inp = g.input(input)?;
                    let h = encode(&mut g, inp)?;
                    let recon = linear(&mut g, "ext.recon", h)?;
                    let target = g.input(x.clone())?;
                    let diff = g.sub(recon, target)?;
                    let sq = g.mul(diff, diff)?;
                    let m = g.input(mask)?;
                    let sq = g.mul(sq, m)?;
                    let s = g.sum(sq)?;
                    losses.push(g.scale(s, 1.0 / (n_masked * f) as f64)?);
                }
                let loss = g.mean_of(&losses)?;
                total += g.value(loss).item();
                batches += 1;
                let grads = g.backward(loss)?;
                adam.step(&mut self.params, &grads)?;
            }
            self.pretrain_loss.push(total / batches.max(1) as f64);
        }
        Ok(())
    }

    /// Trains pooled encoder + softmax accent classifier with CE on batches
    /// drawn from the weighted sampler; reports validation accuracy if given.
    pub fn finetune(&mut self, train: &[Utterance], weights: &[f64], validation: &[Utterance]) -> Result<()> {
        check_features(train, self.feature_dim)?;
        if weights.len() != self.accents {
            return Err(Error::Sampler(format!(
                "{} sampler weights for {} accents",
                weights.len(),
                self.accents
            )));
        }
        let labels: Vec<usize> = train.iter().map(|u| u.accent).collect();
        let sampler = WeightedSampler::new(weights, &labels)?;
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4649_4e45);
        let mut adam = AdamState::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        })?;
        let steps = train.len().div_ceil(cfg.batch_size);
        for _ in 0..cfg.finetune_epochs {
            let mut total = 0.0;
            for _ in 0..steps {
                let mut g = Graph::new(&self.params);
                let mut losses = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let u = &train[sampler.sample(&mut rng)];
                    let lp = self.classifier_graph(&mut g, &u.frames)?.1;
                    losses.push(g.class_loss(lp, u.accent, 0.0)?);
                }
                let loss = g.mean_of(&losses)?;
                total += g.value(loss).item();
                let grads = g.backward(loss)?;
                adam.step(&mut self.params, &grads)?;
            }
            self.finetune_loss.push(total / steps.max(1) as f64);
        }
        if !validation.is_empty() {
            let correct = validation
                .iter()
                .map(|u| self.classify(&u.frames).map(|p| p == u.accent))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|&c| c)
                .count();
            let acc = correct as f64 / validation.len() as f64;
            log::info!("extractor validation accent accuracy {acc:.4}");
            self.validation_accuracy = Some(acc);
        }
        Ok(())
    }

    /// Returns (pooled embedding, log-probabilities).
    fn classifier_graph(&self, g: &mut Graph, frames: &Tensor) -> Result<(Var, Var)> {
        if frames.cols() != self.feature_dim {
            return Err(Error::Dimension(format!(
                "expected {} features, got {}",
                self.feature_dim,
                frames.cols()
            )));
        }
        let x = g.input(frames.clone())?;
        let h = encode(g, x)?;
        let pooled = g.mean_rows(h)?;
        let logits = linear(g, "ext.cls", pooled)?;
        Ok((pooled, g.log_softmax(logits)?))
    }

    pub fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let (pooled, _) = self.classifier_graph(&mut g, frames)?;
        Ok(g.value(pooled).data().to_vec())
    }

    pub fn classify(&self, frames: &Tensor) -> Result<usize> {
        let mut g = Graph::new(&self.params);
        let (_, lp) = self.classifier_graph(&mut g, frames)?;
        Ok(crate::ctc::argmax(g.value(lp).data()))
    }
}

/// Pooled embedding of every utterance, in input order.
pub fn extract_embeddings(extractor: &Extractor, utterances: &[Utterance]) -> Result<Vec<UtteranceEmbedding>> {
    utterances
        .iter()
        .map(|u| {
            Ok(UtteranceEmbedding {
                id: u.id.clone(),
                accent: u.accent,
                values: extractor.embed(&u.frames)?,
            })
        })
        .collect()
}
