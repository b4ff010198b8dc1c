use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let k = centroids.len();
    let d = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..300 {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assignment).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            *centroid = (0..d).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect();
        }
    }
    let inertia = points.iter().zip(&assignment).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
    let _ = k;
    KMeans {
        centroids,
        assignment,
        inertia,
    }
}

/// Seeded k-means (k-means++ initialisation, Lloyd iterations); the restart
/// with the lowest inertia wins, earliest first on ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Parameter(format!("k = {k} for {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
        while centroids.len() < k {
            let weights: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[nearest(p, &centroids)])).collect();
            let total: f64 = weights.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = points.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        idx = i;
                        break;
                    }
                    u -= w;
                }
                idx
            } else {
                rng.random_range(0..points.len())
            };
            centroids.push(points[pick].clone());
        }
        let run = lloyd(points, centroids);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// How the group centroids are obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum GroupSpec {
    /// Discover this many groups with k-means over the accent centroids.
    Count(usize),
    /// Fixed group centroids.
    Seeds(Vec<Vec<f64>>),
}

/// Moves `accent` into the group that contains `join`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapOverride {
    pub accent: usize,
    pub join: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemapTable {
    /// Accent id → group id.
    pub assignment: BTreeMap<usize, usize>,
    /// Members of each group, groups ordered by their smallest member.
    pub groups: Vec<Vec<usize>>,
    pub overrides: Vec<RemapOverride>,
    /// Accents that were absent at training time.
    pub novel: Vec<usize>,
}

impl RemapTable {
    pub fn group_of(&self, accent: usize) -> Result<usize> {
        self.assignment.get(&accent).copied().ok_or(Error::Lookup(accent))
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

pub const KMEANS_RESTARTS: usize = 50;

/// Groups accents by nearest group centroid, then assigns novel accents to
/// the nearest surviving group and applies overrides last.
pub fn remap_accents(
    centroids: &BTreeMap<usize, Vec<f64>>,
    spec: &GroupSpec,
    overrides: &[RemapOverride],
    novel: &BTreeMap<usize, Vec<f64>>,
    seed: u64,
) -> Result<RemapTable> {
    if centroids.is_empty() {
        return Err(Error::Parameter("no accent centroids".into()));
    }
    if let Some(a) = novel.keys().find(|a| centroids.contains_key(a)) {
        return Err(Error::Parameter(format!("accent {a} is both known and novel")));
    }
    let ids: Vec<usize> = centroids.keys().copied().collect();
    let pts: Vec<Vec<f64>> = centroids.values().cloned().collect();
    let group_centroids = match spec {
        GroupSpec::Count(k) => kmeans(&pts, *k, KMEANS_RESTARTS, seed)?.centroids,
        GroupSpec::Seeds(s) if s.is_empty() => return Err(Error::Parameter("no group seeds".into())),
        GroupSpec::Seeds(s) => s.clone(),
    };
    let mut raw: BTreeMap<usize, usize> = ids.iter().zip(&pts).map(|(&a, p)| (a, nearest(p, &group_centroids))).collect();

    let used: BTreeSet<usize> = raw.values().copied().collect();
    for g in 0..group_centroids.len() {
        if !used.contains(&g) {
            log::warn!("remap group {g} received no accents and is dropped");
        }
    }
    let surviving: Vec<usize> = used.into_iter().collect();
    let surviving_centroids: Vec<Vec<f64>> = surviving.iter().map(|&g| group_centroids[g].clone()).collect();
    for (&a, p) in novel {
        raw.insert(a, surviving[nearest(p, &surviving_centroids)]);
    }
    for o in overrides {
        let target = *raw.get(&o.join).ok_or(Error::Lookup(o.join))?;
        if !raw.contains_key(&o.accent) {
            return Err(Error::Lookup(o.accent));
        }
        raw.insert(o.accent, target);
    }
    Ok(canonical(raw, overrides.to_vec(), novel.keys().copied().collect()))
}

/// Renumbers groups in order of their smallest member accent.
fn canonical(raw: BTreeMap<usize, usize>, overrides: Vec<RemapOverride>, novel: Vec<usize>) -> RemapTable {
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut assignment = BTreeMap::new();
    for (&a, &g) in &raw {
        let next = relabel.len();
        let id = *relabel.entry(g).or_insert(next);
        if id == groups.len() {
            groups.push(Vec::new());
        }
        groups[id].push(a);
        assignment.insert(a, id);
    }
    RemapTable {
        assignment,
        groups,
        overrides,
        novel,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(1.0);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        // Both labelings trivial (all singletons or one cluster).
        return Ok(if a == b || (sa == sb) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Mean fraction of each point's `k` nearest neighbours sharing its label.
pub fn knn_purity(points: &[[f64; 2]], labels: &[usize], k: usize) -> Result<f64> {
    let n = points.len();
    if labels.len() != n || k == 0 || k >= n {
        return Err(Error::Parameter(format!("k = {k} for {n} points and {} labels", labels.len())));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]), j))
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let same = others[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
        total += same as f64 / k as f64;
    }
    Ok(total / n as f64)
}
