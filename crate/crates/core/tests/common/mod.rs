#![allow(dead_code)]

use accent_asr::ctc::collapse;
use accent_asr::model::{
    forward_full, init_params, utterance_losses, EmbeddingInput, ForwardOptions, Fusion, Mode, ModelConfig, ParamGroup,
    LABELED_EMBEDDING,
};
use accent_asr::nn::{Grads, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// −log Σ over all V^T frame paths that collapse to `tokens`; `None` if no path does.
pub fn brute_force_ctc(log_probs: &[f64], frames: usize, vocab: usize, tokens: &[usize]) -> Option<f64> {
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    let mut any = false;
    loop {
        if collapse(&path) == tokens {
            any = true;
            total += path.iter().enumerate().map(|(t, &v)| log_probs[t * vocab + v]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == frames {
                return any.then(|| -total.ln());
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Fourth-order central difference of `f` at `x[i]`.
pub fn fd_at(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    let mut at = |d: f64, x: &mut [f64]| {
        x[i] = orig + d;
        f(x)
    };
    let g = (8.0 * (at(h, x) - at(-h, x)) - (at(2.0 * h, x) - at(-2.0 * h, x))) / (12.0 * h);
    x[i] = orig;
    g
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub struct ToyUtt {
    pub frames: Tensor,
    pub tokens: Vec<usize>,
    pub accent: usize,
}

/// Tiny end-to-end model: 4 layers, width 8, taps 1–3, accent tap 2.
pub fn tiny_model(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        conv_channels: vec![6],
        proj_dim: 8,
        emb_dim: 8,
        layers: 4,
        heads: 2,
        ffn_dim: 8,
        head_dim: 6,
        vocab: 5,
        accents: 3,
        ..ModelConfig::default()
    }
    .with_fusion(fusion)
}

/// Steps tried in turn by the end-to-end finite-difference checks. ReLU and
/// max-pool kinks can fall inside the ±2h stencil; a smaller step recovers
/// the one-sided smooth derivative, while a wrong analytic gradient
/// disagrees at every step.
pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Absolute floor of the relative error. Round-off in a 4th-order difference
/// of an O(10) loss at h = 1e-4 is ~1e-10, so entries whose true gradient is
/// zero (e.g. key biases, which softmax ignores) sit far below it.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub max_rel_err: f64,
    pub entries: usize,
    /// Entries that needed a step below the first one.
    pub refined: usize,
    pub worst: String,
}

pub struct GradCase {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub batch: Vec<ToyUtt>,
    pub mode: Mode,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GradCase {
    pub fn new(mode: Mode, fusion: Fusion, gamma: f64, seed: u64) -> Self {
        let cfg = tiny_model(fusion);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = init_params(&cfg, &mut rng).unwrap();
        if fusion != Fusion::None {
            store.insert(LABELED_EMBEDDING, gaussian(&mut rng, cfg.accents, cfg.emb_dim));
        }
        let batch = (0..2)
            .map(|k| ToyUtt {
                frames: gaussian(&mut rng, 12, cfg.feature_dim),
                tokens: vec![1 + k, 3, 4 - k],
                accent: k + 1,
            })
            .collect();
        GradCase {
            cfg,
            store,
            batch,
            mode,
            lambda: 0.3,
            beta: 1.0,
            gamma,
        }
    }

    /// Batch-mean objective. `accent_scale` multiplies β·L_acc in the value;
    /// `grl` sets the reversal coefficient seen by the backward pass.
    fn objective(&self, store: &ParamStore, grl: Option<f64>, accent_scale: f64) -> (f64, Grads) {
        let mut g = Graph::new(store);
        let opts = ForwardOptions {
            accent_grl: grl,
            accent_only: false,
        };
        let mut per = Vec::new();
        for u in &self.batch {
            let emb = if self.cfg.fusion == Fusion::None {
                EmbeddingInput::None
            } else {
                EmbeddingInput::Row {
                    table: LABELED_EMBEDDING,
                    index: u.accent,
                }
            };
            let out = forward_full(&mut g, &self.cfg, &u.frames, emb, opts).unwrap();
            let l = utterance_losses(&mut g, &out, &u.tokens, u.accent, self.gamma).unwrap();
            let mut terms = vec![(l.ctc_final, 1.0)];
            terms.extend(l.ctc_taps.iter().map(|&v| (v, self.lambda)));
            if let Some(a) = l.accent {
                terms.push((a, self.beta * accent_scale));
            }
            per.push(g.weighted_sum(&terms).unwrap());
        }
        let root = g.mean_of(&per).unwrap();
        (g.value(root).item(), g.backward(root).unwrap())
    }

    pub fn analytic(&self) -> Grads {
        self.objective(&self.store, self.mode.grl_coeff(), 1.0).1
    }

    /// The function whose gradient the backward pass computes for `name`:
    /// parameters upstream of the reversal node see β·c·L_acc.
    pub fn surrogate_value(&self, store: &ParamStore, name: &str) -> f64 {
        let c = self.mode.grl_coeff().unwrap_or(1.0);
        let scale = match ParamGroup::of(name) {
            Some(ParamGroup::Encoder | ParamGroup::Embedding) => c,
            _ => 1.0,
        };
        let grl = self.mode.grl_coeff().map(|_| 1.0);
        self.objective(store, grl, scale).0
    }

    /// Gradients of the batch-mean β·L_acc alone, with the reversal
    /// coefficient of `mode`.
    pub fn accent_branch(&self, mode: Mode) -> Grads {
        let mut g = Graph::new(&self.store);
        let opts = ForwardOptions::for_mode(mode);
        let mut per = Vec::new();
        for u in &self.batch {
            let emb = if self.cfg.fusion == Fusion::None {
                EmbeddingInput::None
            } else {
                EmbeddingInput::Row {
                    table: LABELED_EMBEDDING,
                    index: u.accent,
                }
            };
            let out = forward_full(&mut g, &self.cfg, &u.frames, emb, opts).unwrap();
            let l = utterance_losses(&mut g, &out, &u.tokens, u.accent, self.gamma).unwrap();
            per.push(g.weighted_sum(&[(l.accent.unwrap(), self.beta)]).unwrap());
        }
        let root = g.mean_of(&per).unwrap();
        g.backward(root).unwrap()
    }

    /// Parameters where DAT's accent-branch gradient is not exactly −1 (encoder,
    /// embedding) or +1 (accent head) times MTL's; signed zeros compare equal.
    /// Also returns the number of encoder/embedding tensors compared.
    pub fn duality_mismatches(&self) -> (Vec<String>, usize) {
        let (dat, mtl) = (self.accent_branch(Mode::Dat), self.accent_branch(Mode::Mtl));
        let mut bad = Vec::new();
        let mut negated = 0;
        for name in self.store.names() {
            let sign = match ParamGroup::of(name) {
                Some(ParamGroup::Encoder | ParamGroup::Embedding) => -1.0,
                Some(ParamGroup::Accent) => 1.0,
                _ => {
                    if dat.get(&self.store, name).is_some() || mtl.get(&self.store, name).is_some() {
                        bad.push(format!("{name}: CTC head reached by the accent loss"));
                    }
                    continue;
                }
            };
            match (dat.get(&self.store, name), mtl.get(&self.store, name)) {
                (Some(d), Some(m)) => {
                    negated += usize::from(sign < 0.0);
                    if !d.data().iter().zip(m.data()).all(|(x, y)| *x == sign * y) {
                        bad.push(name.to_string());
                    }
                }
                (None, None) => {}
                _ => bad.push(format!("{name}: gradient present in one mode only")),
            }
        }
        (bad, negated)
    }

    /// Largest relative error per parameter group over every entry.
    pub fn check(&self, steps: &[f64], floor: f64, tol: f64) -> Vec<GroupCheck> {
        let grads = self.analytic();
        let mut worst: std::collections::BTreeMap<ParamGroup, GroupCheck> = Default::default();
        let names: Vec<String> = self.store.names().map(str::to_string).collect();
        let mut work = self.store.clone();
        for name in &names {
            let group = ParamGroup::of(name).expect("every parameter belongs to a group");
            if self.mode == Mode::Baseline && group == ParamGroup::Accent {
                continue;
            }
            let a = grads.get(&self.store, name).unwrap_or_else(|| panic!("no gradient for {name}"));
            for i in 0..a.numel() {
                let orig = work.get(name).unwrap().data()[i];
                let mut best = (f64::INFINITY, 0.0, 0);
                for (k, &h) in steps.iter().enumerate() {
                    let mut at = |d: f64| {
                        work.get_mut(name).unwrap().data_mut()[i] = orig + d;
                        self.surrogate_value(&work, name)
                    };
                    let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                    let e = rel_err(a.data()[i], fd, floor);
                    if e < best.0 {
                        best = (e, fd, k);
                    }
                    if e <= tol {
                        break;
                    }
                }
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                let slot = worst.entry(group).or_insert_with(|| GroupCheck {
                    group,
                    max_rel_err: 0.0,
                    entries: 0,
                    refined: 0,
                    worst: String::new(),
                });
                if best.0 >= slot.max_rel_err {
                    slot.max_rel_err = best.0;
                    slot.worst = format!("{name}[{i}]: analytic {:e}, numeric {:e}", a.data()[i], best.1);
                }
                slot.entries += 1;
                slot.refined += usize::from(best.2 > 0);
            }
        }
        worst.into_values().collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct CtcSweep {
    pub cases: usize,
    pub infeasible: usize,
    pub max_loss_err: f64,
    /// Against differences of the raw-lattice loss.
    pub max_lattice_grad_err: f64,
    /// Through log-softmax in the autodiff graph, against logit differences.
    pub max_logit_grad_err: f64,
}

/// `cases` feasible random lattices with T ≤ 6, L ≤ 3, V ≤ 4 (blank included) checked
/// against path enumeration and finite differences.
pub fn ctc_sweep(cases: usize, seed: u64) -> CtcSweep {
    use accent_asr::ctc::{ctc_loss, ctc_loss_raw, CtcTarget, LogProbLattice};
    use accent_asr::Error;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CtcSweep::default();
    while out.cases - out.infeasible < cases {
        let frames = rng.random_range(1..=6);
        let vocab = rng.random_range(2..=4);
        let len = rng.random_range(0..=3);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..vocab)).collect();
        let logits: Vec<f64> = (0..frames * vocab).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let lattice = LogProbLattice::from_logits(frames, vocab, &logits).unwrap();
        let target = CtcTarget::new(tokens.clone(), vocab).unwrap();
        out.cases += 1;
        let brute = brute_force_ctc(lattice.data(), frames, vocab, &tokens);
        let res = match (ctc_loss(&lattice, &target), brute) {
            (Err(Error::Infeasible { .. }), None) => {
                out.infeasible += 1;
                continue;
            }
            (Ok(r), Some(b)) => {
                out.max_loss_err = out.max_loss_err.max((r.loss - b).abs());
                r
            }
            (r, b) => panic!("feasibility disagrees: {r:?} vs brute force {b:?}"),
        };
        let mut lp = lattice.data().to_vec();
        for i in 0..lp.len() {
            let fd = fd_at(&mut lp, i, 1e-4, &mut |x| ctc_loss_raw(x, frames, vocab, &tokens).unwrap().0);
            out.max_lattice_grad_err = out.max_lattice_grad_err.max(rel_err(res.grad.data()[i], fd, 1e-6));
        }
        let through_graph = |x: &[f64]| {
            let mut store = ParamStore::new();
            store.insert("logits", Tensor::matrix(frames, vocab, x.to_vec()).unwrap());
            let mut g = Graph::new(&store);
            let v = g.param("logits").unwrap();
            let lp = g.log_softmax(v).unwrap();
            let l = g.ctc_loss(lp, &tokens).unwrap();
            let grad = g.backward(l).unwrap().get(&store, "logits").unwrap().data().to_vec();
            (g.value(l).item(), grad)
        };
        let analytic = through_graph(&logits).1;
        let mut x = logits.clone();
        for i in 0..x.len() {
            let fd = fd_at(&mut x, i, 1e-4, &mut |x| through_graph(x).0);
            out.max_logit_grad_err = out.max_logit_grad_err.max(rel_err(analytic[i], fd, 1e-6));
        }
    }
    out
}

/// Utterance-level embeddings with region structure: accents of a region
/// share a centre (spread 10) plus a small offset (spread 1), utterances add
/// unit noise. Returns (points, accent labels, accent → region).
pub fn region_embeddings(
    regions: &[usize],
    per_accent: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let n_regions = regions.iter().max().map_or(0, |m| m + 1);
    let centres = gaussian(rng, n_regions, dim);
    let offsets = gaussian(rng, regions.len(), dim);
    let (mut points, mut labels) = (Vec::new(), Vec::new());
    for (a, &r) in regions.iter().enumerate() {
        for _ in 0..per_accent {
            let p = (0..dim)
                .map(|j| {
                    10.0 * centres.data()[r * dim + j]
                        + offsets.data()[a * dim + j]
                        + rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            points.push(p);
            labels.push(a);
        }
    }
    (points, labels, regions.to_vec())
}

pub struct RemapOracle {
    pub ari: f64,
    pub groups: Vec<Vec<usize>>,
    /// Whether each novel accent landed in the group of its region.
    pub novel_placed: bool,
}

/// LDA on the seen accents, k-means remap of their centroids, novel accent
/// placed by its projected centroid; ARI against the true regions.
pub fn remap_oracle(seed: u64) -> RemapOracle {
    use accent_asr::analysis::{adjusted_rand_index, lda_reduce, remap_accents, GroupSpec, Lda};
    use std::collections::BTreeMap;
    let regions = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    let novel_accent = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (points, labels, regions) = region_embeddings(&regions, 40, 16, &mut rng);
    let seen: Vec<usize> = (0..points.len()).filter(|&i| labels[i] != novel_accent).collect();
    let train: Vec<Vec<f64>> = seen.iter().map(|&i| points[i].clone()).collect();
    let train_labels: Vec<usize> = seen.iter().map(|&i| labels[i]).collect();
    let reduced = lda_reduce(&train, &train_labels, 5).unwrap();
    let centroid = |rows: Vec<&Vec<f64>>| -> Vec<f64> {
        (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
    };
    let mut centroids = BTreeMap::new();
    for a in 0..novel_accent {
        let rows = reduced.iter().zip(&train_labels).filter(|(_, &l)| l == a).map(|(p, _)| p).collect();
        centroids.insert(a, centroid(rows));
    }
    let lda = Lda::fit(&train, &train_labels, 5).unwrap();
    let novel_rows: Vec<Vec<f64>> = (0..points.len())
        .filter(|&i| labels[i] == novel_accent)
        .map(|i| lda.transform(&points[i]).unwrap())
        .collect();
    let novel = BTreeMap::from([(novel_accent, centroid(novel_rows.iter().collect()))]);
    let table = remap_accents(&centroids, &GroupSpec::Count(3), &[], &novel, seed).unwrap();
    let seen_accents: Vec<usize> = (0..novel_accent).collect();
    let truth: Vec<usize> = seen_accents.iter().map(|&a| regions[a]).collect();
    let found: Vec<usize> = seen_accents.iter().map(|&a| table.assignment[&a]).collect();
    let sibling = (0..novel_accent).find(|&a| regions[a] == regions[novel_accent]).unwrap();
    RemapOracle {
        ari: adjusted_rand_index(&truth, &found).unwrap(),
        novel_placed: table.assignment[&novel_accent] == table.assignment[&sibling],
        groups: table.groups,
    }
}

/// Two 5-D unit Gaussians whose means are 10σ apart, 100 points each.
pub fn two_clusters(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..100 {
            let mut p: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            p[0] += 10.0 * c as f64;
            points.push(p);
            labels.push(c);
        }
    }
    (points, labels)
}
