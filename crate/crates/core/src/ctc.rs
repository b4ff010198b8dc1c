//! Connectionist temporal classification: loss with exact gradients, greedy
//! best-path decoding, and edit-distance metrics.
//!
//! The loss runs the forward–backward recursion in log space over the
//! blank-extended label sequence `∅ y₁ ∅ y₂ … ∅ y_L ∅`, so it is stable for
//! any number of frames.

use crate::error::{Error, Result};
use crate::nn::{logsumexp, Tensor};

/// Blank symbol id.
pub const BLANK: usize = 0;

/// Token sequence over a vocabulary of size `vocab` (blank excluded from the sequence).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget {
    tokens: Vec<usize>,
}

impl CtcTarget {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t == BLANK || t >= vocab) {
            return Err(Error::Contract(format!(
                "target token {bad} outside [1, {}]",
                vocab.saturating_sub(1)
            )));
        }
        Ok(CtcTarget { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// T×V matrix of per-frame log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    frames: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl LogProbLattice {
    pub fn new(frames: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || vocab == 0 || data.len() != frames * vocab {
            return Err(Error::Dimension(format!(
                "lattice {frames}×{vocab} with {} values",
                data.len()
            )));
        }
        for (t, row) in data.chunks(vocab).enumerate() {
            let lse = logsumexp(row);
            if (lse).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "lattice frame {t} is not normalised (logsumexp {lse})"
                )));
            }
        }
        Ok(LogProbLattice {
            frames,
            vocab,
            data,
        })
    }

    /// Normalises each row of unnormalised scores with a log-softmax.
    pub fn from_logits(frames: usize, vocab: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != frames * vocab || vocab == 0 {
            return Err(Error::Dimension(format!(
                "logits {frames}×{vocab} with {} values",
                logits.len()
            )));
        }
        let mut data = logits.to_vec();
        for row in data.chunks_mut(vocab) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        LogProbLattice::new(frames, vocab, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        LogProbLattice::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Loss and its gradient with respect to every lattice entry.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    pub grad: Tensor,
}

/// Minimum number of frames that can emit `tokens`: one per label plus a
/// separating blank between each adjacent repeat.
pub fn min_frames(tokens: &[usize]) -> usize {
    tokens.len() + tokens.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn ctc_loss(lattice: &LogProbLattice, target: &CtcTarget) -> Result<CtcOutput> {
    if let Some(&bad) = target.tokens().iter().find(|&&t| t >= lattice.vocab) {
        return Err(Error::Contract(format!(
            "target token {bad} outside vocabulary of {}",
            lattice.vocab
        )));
    }
    let (loss, grad) = ctc_loss_raw(&lattice.data, lattice.frames, lattice.vocab, target.tokens())?;
    Ok(CtcOutput {
        loss,
        grad: Tensor::matrix(lattice.frames, lattice.vocab, grad)?,
    })
}

/// CTC loss over a raw row-major T×V score matrix interpreted as log-probabilities.
///
/// Rows need not be normalised; the returned gradient is the exact
/// derivative of `−log Σ_π Π_t exp(lp[t, π_t])` with respect to each entry.
pub fn ctc_loss_raw(
    log_probs: &[f64],
    frames: usize,
    vocab: usize,
    tokens: &[usize],
) -> Result<(f64, Vec<f64>)> {
    debug_assert_eq!(log_probs.len(), frames * vocab);
    let required = min_frames(tokens);
    if frames == 0 || frames < required {
        return Err(Error::Infeasible {
            frames,
            labels: tokens.len(),
            required,
        });
    }
    let ninf = f64::NEG_INFINITY;
    let s_len = 2 * tokens.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK } else { tokens[s / 2] };
    // Skip transition s−2 → s is allowed onto a non-blank that differs from the previous label.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && tokens[s / 2] != tokens[s / 2 - 1];
    let lp = |t: usize, s: usize| log_probs[t * vocab + label(s)];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if can_skip(s) {
                terms[2] = prev[s - 2];
            }
            let a = logsumexp(&terms);
            cur[s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut terms = [next[s], ninf, ninf];
            if s + 1 < s_len {
                terms[1] = next[s + 1];
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms[2] = next[s + 2];
            }
            let b = logsumexp(&terms);
            cur[s] = if b == ninf { ninf } else { b + lp(t, s) };
        }
    }

    let end = &alpha[last..];
    let log_like = if s_len > 1 {
        logsumexp(&[end[s_len - 1], end[s_len - 2]])
    } else {
        end[0]
    };
    if !log_like.is_finite() {
        return Err(Error::Numeric("CTC log-likelihood".into()));
    }

    // ∂(−log P)/∂lp[t, v] = −Σ_{s: l'_s = v} α_t(s) β_t(s) / (p_t(l'_s) · P).
    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = (a + b - lp(t, s) - log_like).exp();
            grad[t * vocab + label(s)] -= occ;
        }
    }
    Ok((-log_like, grad))
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.frames)
        .map(|t| argmax(lattice.frame(t)))
        .collect();
    collapse(&path)
}

/// Applies the CTC collapse rule to a frame-level path.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Corpus-level WER: total edit distance over total reference length.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Dimension(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::UndefinedWer);
    }
    let errors: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h))
        .sum();
    Ok(errors as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(rows: &[&[f64]]) -> LogProbLattice {
        let v = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        LogProbLattice::new(rows.len(), v, data).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lat = lattice(&[&[0.5, 0.5]]);
        let out = ctc_loss(&lat, &CtcTarget::new(vec![1], 2).unwrap()).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_uniform() {
        // Valid paths (a,a), (∅,a), (a,∅): probability 0.75.
        let lat = lattice(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let out = ctc_loss(&lat, &CtcTarget::new(vec![1], 2).unwrap()).unwrap();
        assert!((out.loss - 0.287682072451781).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lat = lattice(&[&[0.7, 0.2, 0.1], &[0.4, 0.3, 0.3], &[0.9, 0.05, 0.05]]);
        let out = ctc_loss(&lat, &CtcTarget::new(vec![], 3).unwrap()).unwrap();
        let expected = -(0.7f64.ln() + 0.4f64.ln() + 0.9f64.ln());
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_names_sizes() {
        let lat = lattice(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let err = ctc_loss(&lat, &CtcTarget::new(vec![1, 1], 2).unwrap()).unwrap_err();
        match err {
            Error::Infeasible {
                frames,
                labels,
                required,
            } => assert_eq!((frames, labels, required), (2, 2, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn target_validation() {
        assert!(CtcTarget::new(vec![0], 3).is_err());
        assert!(CtcTarget::new(vec![3], 3).is_err());
        assert!(LogProbLattice::new(1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn certain_alignment_has_zero_loss() {
        let lat = lattice(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let out = ctc_loss(&lat, &CtcTarget::new(vec![1, 2], 3).unwrap()).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    fn path_lattice(path: &[usize], v: usize) -> LogProbLattice {
        let logits: Vec<f64> = path
            .iter()
            .flat_map(|&p| (0..v).map(move |i| if i == p { 5.0 } else { 0.0 }))
            .collect();
        LogProbLattice::from_logits(path.len(), v, &logits).unwrap()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_decode(&path_lattice(&[1, 1, 0, 2, 2], 3)), vec![1, 2]);
        assert_eq!(greedy_decode(&path_lattice(&[0, 0, 0], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&path_lattice(&[1, 0, 1], 3)), vec![1, 1]);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "x", "c"]), 1);
        assert_eq!(edit_distance::<&str>(&[], &["a", "b"]), 2);
        let w = wer(&[vec!["a", "b", "c"]], &[vec!["a", "x", "c"]]).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            wer::<u8>(&[vec![]], &[vec![1]]),
            Err(Error::UndefinedWer)
        ));
    }
}
