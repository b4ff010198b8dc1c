//! Deterministic synthetic multi-accent corpus.
//!
//! Each token owns a prototype feature vector. An utterance renders its token
//! sequence as runs of prototype frames (with leading/trailing silence), then
//! applies the speaker's accent: an orthogonal distortion built from Givens
//! rotations plus a bias, both shared within a latent region and perturbed
//! per accent. Gaussian noise is added last.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub accents: usize,
    /// Latent region of each accent.
    pub regions: Vec<usize>,
    pub dominant: usize,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    /// Output symbols including the blank (token ids are 1..vocab).
    pub vocab: usize,
    pub feature_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub silence_frames: usize,
    pub transform_strength: f64,
    /// Per-accent share of the regional distortion.
    pub accent_spread: f64,
    pub noise: f64,
    /// Accents excluded from training in the held-out split.
    pub held_out: Vec<usize>,
    /// Fraction of dominant-accent utterances rendered with another accent.
    pub contamination: f64,
    /// Extra speed-perturbed copies of each training utterance (1.0 is the original).
    pub speed_factors: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            accents: 6,
            regions: vec![0, 0, 1, 1, 2, 2],
            dominant: 0,
            train_counts: vec![400, 60, 60, 60, 60, 60],
            test_counts: vec![60, 30, 30, 30, 30, 30],
            vocab: 12,
            feature_dim: 16,
            min_tokens: 6,
            max_tokens: 10,
            min_frames_per_token: 4,
            max_frames_per_token: 5,
            silence_frames: 2,
            transform_strength: 1.0,
            accent_spread: 0.3,
            noise: 0.9,
            held_out: vec![5],
            contamination: 0.0,
            speed_factors: vec![1.0],
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("corpus.{field}"), msg));
        let n = self.accents;
        if n == 0 {
            return err("accents", "must be positive".into());
        }
        if self.regions.len() != n {
            return err("regions", format!("{} entries for {n} accents", self.regions.len()));
        }
        if self.train_counts.len() != n || self.test_counts.len() != n {
            return err("train_counts", format!("train/test counts need {n} entries"));
        }
        if self.train_counts.iter().chain(&self.test_counts).any(|&c| c == 0) {
            return err("train_counts", "every count must be positive".into());
        }
        if self.dominant >= n {
            return err("dominant", format!("accent {} out of range", self.dominant));
        }
        if let Some(h) = self.held_out.iter().find(|&&h| h >= n) {
            return err("held_out", format!("unknown accent id {h}"));
        }
        if self.held_out.contains(&self.dominant) {
            return err("held_out", "the dominant accent cannot be held out".into());
        }
        if self.vocab < 3 {
            return err("vocab", "needs the blank and at least two tokens".into());
        }
        if self.feature_dim < 2 {
            return err("feature_dim", "needs at least two dimensions".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return err("min_tokens", "need 0 < min_tokens ≤ max_tokens".into());
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return err(
                "min_frames_per_token",
                "need 0 < min_frames_per_token ≤ max_frames_per_token".into(),
            );
        }
        if self.transform_strength < 0.0 || self.noise < 0.0 || self.accent_spread < 0.0 {
            return err("noise", "strength, spread and noise must be ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.contamination) {
            return err("contamination", "must lie in [0, 1]".into());
        }
        if self.speed_factors.iter().any(|&f| !(f > 0.0)) {
            return err("speed_factors", "factors must be positive".into());
        }
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.regions.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub accent: usize,
    pub split: Split,
    pub tokens: Vec<usize>,
    /// T×F feature frames.
    pub frames: Tensor,
}

/// One JSON-lines corpus record.
#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    accent: usize,
    split: Split,
    tokens: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

/// Orthogonal matrix plus bias applied to every clean frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AccentTransform {
    /// Row-major F×F orthogonal matrix.
    pub rotation: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AccentTransform {
    pub fn identity(dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        AccentTransform {
            rotation,
            bias: vec![0.0; dim],
        }
    }

    fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Left-multiplies by a Givens rotation in the (i, j) plane.
    fn rotate(&mut self, i: usize, j: usize, angle: f64) {
        let d = self.dim();
        let (c, s) = (angle.cos(), angle.sin());
        for col in 0..d {
            let a = self.rotation[i * d + col];
            let b = self.rotation[j * d + col];
            self.rotation[i * d + col] = c * a - s * b;
            self.rotation[j * d + col] = s * a + c * b;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|r| {
                let row = &self.rotation[r * d..(r + 1) * d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias[r]
            })
            .collect()
    }

    /// Inverse map: `Rᵀ (y − b)`.
    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let centred: Vec<f64> = y.iter().zip(&self.bias).map(|(a, b)| a - b).collect();
        (0..d)
            .map(|c| (0..d).map(|r| self.rotation[r * d + c] * centred[r]).sum())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub utterances: Vec<Utterance>,
    /// Clean feature vector of each symbol; index 0 is silence.
    pub prototypes: Vec<Vec<f64>>,
    pub transforms: Vec<AccentTransform>,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the combined words.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn build_transforms(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<AccentTransform> {
    let d = cfg.feature_dim;
    let strength = cfg.transform_strength;
    let random_rotation = |t: &mut AccentTransform, rng: &mut ChaCha8Rng, scale: f64| {
        for _ in 0..d {
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let angle = scale * rng.random_range(-1.0..1.0) * std::f64::consts::FRAC_PI_2;
            t.rotate(i, j, angle);
        }
    };
    let regions: Vec<AccentTransform> = (0..cfg.region_count())
        .map(|_| {
            let mut t = AccentTransform::identity(d);
            random_rotation(&mut t, rng, strength);
            t.bias = (0..d).map(|_| strength * normal(rng)).collect();
            t
        })
        .collect();
    (0..cfg.accents)
        .map(|a| {
            let mut t = regions[cfg.regions[a]].clone();
            random_rotation(&mut t, rng, strength * cfg.accent_spread);
            for b in &mut t.bias {
                *b += strength * cfg.accent_spread * normal(rng);
            }
            t
        })
        .collect()
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
        let mut prototypes = vec![vec![0.0; cfg.feature_dim]];
        for _ in 1..cfg.vocab {
            prototypes.push((0..cfg.feature_dim).map(|_| normal(&mut rng)).collect());
        }
        let transforms = build_transforms(cfg, &mut rng);
        let mut corpus = Corpus {
            config: cfg.clone(),
            utterances: Vec::new(),
            prototypes,
            transforms,
        };

        let mut index = 0u64;
        for accent in 0..cfg.accents {
            for (split, count) in [(Split::Train, cfg.train_counts[accent]), (Split::Test, cfg.test_counts[accent])] {
                for k in 0..count {
                    let mut urng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index));
                    index += 1;
                    let tokens = corpus.sample_tokens(&mut urng);
                    let durations = corpus.sample_durations(tokens.len(), &mut urng);
                    let mut render_as = accent;
                    if accent == cfg.dominant && cfg.accents > 1 && urng.random::<f64>() < cfg.contamination {
                        render_as = urng.random_range(0..cfg.accents - 1);
                        if render_as >= cfg.dominant {
                            render_as += 1;
                        }
                    }
                    let frames = corpus.render(&tokens, &durations, render_as, cfg.noise, &mut urng);
                    let tag = if split == Split::Train { "train" } else { "test" };
                    let id = format!("a{accent}-{tag}-{k:05}");
                    if split == Split::Train {
                        for &f in cfg.speed_factors.iter().filter(|&&f| f != 1.0) {
                            corpus.utterances.push(Utterance {
                                id: format!("{id}-sp{f}"),
                                accent,
                                split,
                                tokens: tokens.clone(),
                                frames: speed_perturb(&frames, f)?,
                            });
                        }
                    }
                    corpus.utterances.push(Utterance {
                        id,
                        accent,
                        split,
                        tokens,
                        frames,
                    });
                }
            }
        }
        Ok(corpus)
    }

    /// Random token sequence with no immediate repeats.
    fn sample_tokens<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let cfg = &self.config;
        let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        while tokens.len() < len {
            let t = rng.random_range(1..cfg.vocab);
            if tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        tokens
    }

    fn sample_durations<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let cfg = &self.config;
        (0..n)
            .map(|_| rng.random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token))
            .collect()
    }

    /// Renders tokens with the given per-token durations under an accent.
    pub fn render<R: Rng>(&self, tokens: &[usize], durations: &[usize], accent: usize, noise: f64, rng: &mut R) -> Tensor {
        let f = self.config.feature_dim;
        let sil = self.config.silence_frames;
        let mut symbols = vec![0usize; sil];
        for (&t, &d) in tokens.iter().zip(durations) {
            symbols.extend(std::iter::repeat_n(t, d));
        }
        symbols.extend(std::iter::repeat_n(0, sil));
        let transform = &self.transforms[accent];
        let mut data = Vec::with_capacity(symbols.len() * f);
        for &s in &symbols {
            let clean = transform.apply(&self.prototypes[s]);
            data.extend(clean.into_iter().map(|v| v + noise * normal(rng)));
        }
        Tensor::matrix(symbols.len(), f, data).expect("frame shape")
    }

    pub fn count(&self, accent: usize, split: Split) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.accent == accent && u.split == split)
            .count()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_utterances(path, &self.utterances)
    }
}

pub fn write_utterances(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for u in utterances {
        let rec = UtteranceRecord {
            id: u.id.clone(),
            accent: u.accent,
            split: u.split,
            tokens: u.tokens.clone(),
            frames: u.frames.to_rows(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::json(&u.id, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(Utterance {
            frames: Tensor::from_rows(&rec.frames)?,
            id: rec.id,
            accent: rec.accent,
            split: rec.split,
            tokens: rec.tokens,
        });
    }
    Ok(out)
}

/// Nearest-frame resampling to `round(T / factor)` frames.
pub fn speed_perturb(frames: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return Err(Error::Contract(format!("speed factor must be positive, got {factor}")));
    }
    let t = frames.rows();
    let out_t = (t as f64 / factor).round() as usize;
    if out_t == 0 {
        return Err(Error::Contract(format!(
            "speed factor {factor} leaves no frames from {t}"
        )));
    }
    let f = frames.cols();
    let mut data = Vec::with_capacity(out_t * f);
    for i in 0..out_t {
        let src = ((i as f64 * factor).round() as usize).min(t - 1);
        data.extend_from_slice(frames.row_slice(src));
    }
    Tensor::matrix(out_t, f, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Every accent in training and test.
    #[default]
    All,
    /// Held-out accents appear only in test, as novel accents.
    S18,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::All => "all",
            SplitMode::S18 => "s18",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SplitMode::All),
            "s18" => Ok(SplitMode::S18),
            other => Err(Error::config("train.split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataSplit {
    pub mode: SplitMode,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub dominant: usize,
    /// Accents present in training.
    pub seen: BTreeSet<usize>,
    /// Accents present only in test.
    pub novel: BTreeSet<usize>,
}

pub fn split(corpus: &Corpus, mode: SplitMode) -> Result<DataSplit> {
    split_utterances(&corpus.utterances, &corpus.config, mode)
}

pub fn split_utterances(utterances: &[Utterance], cfg: &CorpusConfig, mode: SplitMode) -> Result<DataSplit> {
    if let Some(h) = cfg.held_out.iter().find(|&&h| h >= cfg.accents) {
        return Err(Error::config("corpus.held_out", format!("unknown accent id {h}")));
    }
    let held: BTreeSet<usize> = match mode {
        SplitMode::All => BTreeSet::new(),
        SplitMode::S18 => cfg.held_out.iter().copied().collect(),
    };
    let train: Vec<Utterance> = utterances
        .iter()
        .filter(|u| u.split == Split::Train && !held.contains(&u.accent))
        .cloned()
        .collect();
    let test: Vec<Utterance> = utterances
        .iter()
        .filter(|u| u.split == Split::Test)
        .cloned()
        .collect();
    let seen = train.iter().map(|u| u.accent).collect();
    let novel = test
        .iter()
        .map(|u| u.accent)
        .filter(|a| held.contains(a))
        .collect();
    Ok(DataSplit {
        mode,
        train,
        test,
        dominant: cfg.dominant,
        seen,
        novel,
    })
}

impl DataSplit {
    /// Keeps only training utterances of the dominant accent.
    pub fn dominant_only(mut self) -> Self {
        let d = self.dominant;
        self.train.retain(|u| u.accent == d);
        self.seen = [d].into_iter().collect();
        self
    }
}
