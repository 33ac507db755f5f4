//! Medoid prototypes per cluster and cross-modal cluster matching.

use serde::{Deserialize, Serialize};

use super::gmm::{gmm_assign, ClusterModel};
use crate::error::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Greedy medoids of one point set, as indices into `points`. The first
/// minimizes the summed distance to all points; each later one is the point
/// that most reduces the summed distance to the nearest chosen medoid.
/// Ties go to the lower index.
pub fn greedy_medoids(points: &[&[f64]], k: usize) -> Vec<usize> {
    let n = points.len();
    if n <= k {
        return (0..n).collect();
    }
    let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(points[i], points[j])).collect()).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in (0..n).filter(|c| !chosen.contains(c)) {
            let cost: f64 = (0..n).map(|i| nearest[i].min(d[c][i])).sum();
            if cost < best.0 {
                best = (cost, c);
            }
        }
        chosen.push(best.1);
        for i in 0..n {
            nearest[i] = nearest[i].min(d[best.1][i]);
        }
    }
    chosen
}

/// For each mixture component, the ids of up to `k` medoids among the
/// vectors assigned to it (empty for components with no members).
pub fn kmedoids_prototypes(
    model: &ClusterModel,
    vectors: &[Vec<f64>],
    ids: &[String],
    k: usize,
) -> Result<Vec<Vec<String>>> {
    if ids.len() != vectors.len() {
        return Err(Error::Input(format!("{} ids for {} vectors", ids.len(), vectors.len())));
    }
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let (labels, _) = gmm_assign(model, vectors)?;
    let mut out = Vec::with_capacity(model.n_components());
    for c in 0..model.n_components() {
        let members: Vec<usize> = (0..vectors.len()).filter(|&i| labels[i] == c).collect();
        let points: Vec<&[f64]> = members.iter().map(|&i| vectors[i].as_slice()).collect();
        let picked = greedy_medoids(&points, k);
        out.push(picked.into_iter().map(|m| ids[members[m]].clone()).collect());
    }
    Ok(out)
}

/// Maximum-weight perfect assignment on a square matrix: returns `perm` with
/// row `i` matched to column `perm[i]`.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    // shortest augmenting path with potentials, on costs = −weights (1-indexed)
    let cost = |i: usize, j: usize| -weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatching {
    /// H&E component `i` corresponds to SIM component `perm[i]`.
    pub perm: Vec<usize>,
    pub mean_cosine: f64,
}

impl ClusterMatching {
    /// Fraction of registered pairs whose SIM component is the match of their
    /// H&E component.
    pub fn agreement(&self, he_labels: &[usize], sim_labels: &[usize]) -> Result<f64> {
        if he_labels.len() != sim_labels.len() || he_labels.is_empty() {
            return Err(Error::Input("agreement needs equally many nonzero H&E and SIM labels".into()));
        }
        let hits = he_labels
            .iter()
            .zip(sim_labels)
            .filter(|(&h, &s)| self.perm.get(h) == Some(&s))
            .count();
        Ok(hits as f64 / he_labels.len() as f64)
    }
}

/// Pairs the components of two mixtures to maximize summed centroid cosine.
pub fn match_clusters(he: &ClusterModel, sim: &ClusterModel) -> Result<ClusterMatching> {
    let n = he.n_components();
    if sim.n_components() != n {
        return Err(Error::Input(format!("{n} vs {} components", sim.n_components())));
    }
    let sims: Vec<Vec<f64>> = he
        .means
        .iter()
        .map(|a| sim.means.iter().map(|b| cosine(a, b)).collect())
        .collect();
    let perm = hungarian_max(&sims);
    let mean_cosine = if n == 0 {
        0.0
    } else {
        perm.iter().enumerate().map(|(i, &j)| sims[i][j]).sum::<f64>() / n as f64
    };
    Ok(ClusterMatching { perm, mean_cosine })
}
