use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Fitted Fisher discriminant projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Lda {
    /// Global mean subtracted before projecting.
    pub mean: Vec<f64>,
    /// k unit-length discriminant directions, strongest first.
    pub directions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Lda {
    /// Solves `S_b w = λ S_w w` with `S_w` regularised by
    /// `ε = 1e-6 · trace(S_w) / D` on the diagonal.
    pub fn fit(points: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Lda> {
        if points.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let d = points.first().map_or(0, Vec::len);
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Dimension("points must be non-empty with a common width".into()));
        }
        let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            classes.entry(l).or_default().push(i);
        }
        let c = classes.len();
        if c < 2 {
            return Err(Error::Dimension("LDA needs at least two classes".into()));
        }
        if k == 0 || k > d.min(c - 1) {
            return Err(Error::Dimension(format!(
                "output dimension {k} must lie in 1..={} (D={d}, classes={c})",
                d.min(c - 1)
            )));
        }
        if points.len() <= c {
            return Err(Error::Dimension(format!(
                "{} points for {c} classes; need more points than classes",
                points.len()
            )));
        }

        let n = points.len() as f64;
        let vec = |p: &[f64]| DVector::from_column_slice(p);
        let mut mean = DVector::zeros(d);
        for p in points {
            mean += vec(p);
        }
        mean /= n;
        let mut sw = DMatrix::zeros(d, d);
        let mut sb = DMatrix::zeros(d, d);
        for members in classes.values() {
            let mut mu = DVector::zeros(d);
            for &i in members {
                mu += vec(&points[i]);
            }
            mu /= members.len() as f64;
            for &i in members {
                let x = vec(&points[i]) - &mu;
                sw += &x * x.transpose();
            }
            let dm = &mu - &mean;
            sb += (&dm * dm.transpose()) * members.len() as f64;
        }
        let trace = sw.trace();
        let eps = if trace > 0.0 { 1e-6 * trace / d as f64 } else { 1e-12 };
        for i in 0..d {
            sw[(i, i)] += eps;
        }

        let chol = nalgebra::Cholesky::new(sw)
            .ok_or_else(|| Error::Numeric("within-class scatter is not positive definite".into()))?;
        let l = chol.l();
        let linv_sb = l
            .solve_lower_triangular(&sb)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        let m = l
            .solve_lower_triangular(&linv_sb.transpose())
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        let m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let lt = l.transpose();
        let mut directions = Vec::with_capacity(k);
        let mut eigenvalues = Vec::with_capacity(k);
        for &j in order.iter().take(k) {
            let v = eig.eigenvectors.column(j).into_owned();
            let w = lt
                .solve_upper_triangular(&v)
                .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
            let mut w: Vec<f64> = (&w / w.norm()).iter().copied().collect();
            // Sign convention: largest-magnitude component positive.
            let pivot = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            if w[pivot] < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            directions.push(w);
            eigenvalues.push(eig.eigenvalues[j]);
        }
        Ok(Lda {
            mean: mean.iter().copied().collect(),
            directions,
            eigenvalues,
        })
    }

    pub fn transform(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "point of width {} for an LDA fitted on width {}",
                point.len(),
                self.mean.len()
            )));
        }
        Ok(self
            .directions
            .iter()
            .map(|w| w.iter().zip(point).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect())
    }
}

/// Fits LDA on labelled points and projects them to `k` dimensions.
pub fn lda_reduce(points: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    let lda = Lda::fit(points, labels, k)?;
    points.iter().map(|p| lda.transform(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fisher_direction_for_axis_aligned_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, y) in [(0, -5.0), (1, 5.0)] {
            for _ in 0..50 {
                pts.push(vec![rng.random_range(-3.0..3.0), y]);
                labels.push(c);
            }
        }
        let lda = Lda::fit(&pts, &labels, 1).unwrap();
        assert!(lda.directions[0][1].abs() >= 0.999);
    }

    #[test]
    fn rank_bound() {
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64 % 7.0, 1.0 + (i % 3) as f64]).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        assert!(lda_reduce(&pts, &labels, 2).is_ok());
        assert!(matches!(lda_reduce(&pts, &labels, 3), Err(Error::Dimension(_))));
        assert!(lda_reduce(&pts[..3], &labels[..3], 1).is_err());
    }

    #[test]
    fn class_means_keep_their_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..30 {
                let t = c as f64 * 4.0 + rng.random_range(-1.0..1.0);
                pts.push(vec![t, 0.5 * t + rng.random_range(-1.0..1.0)]);
                labels.push(c);
            }
        }
        let out = lda_reduce(&pts, &labels, 1).unwrap();
        let mean = |c: usize| {
            let v: Vec<f64> = out.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p[0]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (a, b, c) = (mean(0), mean(1), mean(2));
        assert!((a < b && b < c) || (a > b && b > c));
    }
}
