//! Diagonal-covariance Gaussian mixtures fitted by EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 8;
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Components whose weight falls below this are considered collapsed.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop when the per-point log-likelihood gains less than this.
    pub tol: f64,
    pub seed: u64,
}

impl GmmConfig {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            max_iter: 200,
            tol: 1e-8,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub weights: Vec<f64>,
    /// `n_components` rows of length `dim`.
    pub means: Vec<Vec<f64>>,
    /// Diagonal variances, same layout as `means`.
    pub variances: Vec<Vec<f64>>,
    /// Mean per-point log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl ClusterModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((v, m), s2) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            acc += (v - m).powi(2) / s2 + s2.ln();
        }
        self.weights[k].ln() - 0.5 * (acc + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Responsibilities of one point and its log-likelihood.
    fn posterior(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let logs: Vec<f64> = (0..self.n_components()).map(|k| self.log_density(k, x)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        (r, max + z.ln())
    }
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let d = vectors.first().map(Vec::len).ok_or_else(|| Error::Input("no vectors".into()))?;
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("vectors must share one nonzero length".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("vectors contain non-finite values".into()));
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding: first center uniform, later ones with probability
/// proportional to the squared distance to the nearest chosen center.
fn seed_means(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centers = vec![vectors[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(vectors[pick].clone());
        for (i, v) in vectors.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(v, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Fits a mixture with EM. A component whose weight collapses is re-seeded
/// once at the worst-explained point of the widest component; a second
/// collapse is an error.
pub fn gmm_fit(vectors: &[Vec<f64>], config: &GmmConfig) -> Result<ClusterModel> {
    let d = check_vectors(vectors)?;
    let n = vectors.len();
    let k = config.n_components;
    if k == 0 || n < k {
        return Err(Error::Input(format!("cannot fit {k} components to {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut global_var = vec![0.0; d];
    let mut global_mean = vec![0.0; d];
    for v in vectors {
        for j in 0..d {
            global_mean[j] += v[j] / n as f64;
        }
    }
    for v in vectors {
        for j in 0..d {
            global_var[j] += (v[j] - global_mean[j]).powi(2) / n as f64;
        }
    }
    global_var.iter_mut().for_each(|s| *s = s.max(VARIANCE_FLOOR));
    let model = ClusterModel {
        weights: vec![1.0 / k as f64; k],
        means: seed_means(vectors, k, &mut rng),
        variances: vec![global_var; k],
        log_likelihood: Vec::new(),
    };

    gmm_refine(model, vectors, config)
}

/// Runs EM from an explicit starting model.
pub fn gmm_refine(mut model: ClusterModel, vectors: &[Vec<f64>], config: &GmmConfig) -> Result<ClusterModel> {
    let d = check_vectors(vectors)?;
    let n = vectors.len();
    let k = model.n_components();
    if model.dim() != d || model.means.len() != k || model.variances.len() != k {
        return Err(Error::Input("starting model does not match the data".into()));
    }
    model.log_likelihood.clear();
    let mut reseeded = false;
    let mut resp = vec![vec![0.0; k]; n];
    for _ in 0..config.max_iter {
        // E step
        let mut ll = 0.0;
        for (i, v) in vectors.iter().enumerate() {
            let (r, l) = model.posterior(v);
            resp[i] = r;
            ll += l;
        }
        let ll = ll / n as f64;
        if !ll.is_finite() {
            return Err(Error::Numeric("mixture log-likelihood is not finite".into()));
        }
        let converged = model
            .log_likelihood
            .last()
            .is_some_and(|prev| (ll - prev).abs() < config.tol * (1.0 + prev.abs()));
        model.log_likelihood.push(ll);
        if converged {
            break;
        }

        // M step
        let nk: Vec<f64> = (0..k).map(|c| resp.iter().map(|r| r[c]).sum()).collect();
        if let Some(dead) = (0..k).find(|&c| nk[c] / (n as f64) < DEGENERATE_WEIGHT) {
            if reseeded {
                return Err(Error::Numeric(format!("mixture component {dead} collapsed twice")));
            }
            reseeded = true;
            reseed(&mut model, dead, vectors, &resp);
            continue;
        }
        for c in 0..k {
            model.weights[c] = nk[c] / n as f64;
            let mut mean = vec![0.0; d];
            for (v, r) in vectors.iter().zip(&resp) {
                for j in 0..d {
                    mean[j] += r[c] * v[j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk[c]);
            let mut var = vec![0.0; d];
            for (v, r) in vectors.iter().zip(&resp) {
                for j in 0..d {
                    var[j] += r[c] * (v[j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|s| *s = (*s / nk[c]).max(VARIANCE_FLOOR));
            model.means[c] = mean;
            model.variances[c] = var;
        }
    }
    Ok(model)
}

/// Moves component `dead` onto the point of the highest-variance component
/// that that component explains worst.
fn reseed(model: &mut ClusterModel, dead: usize, vectors: &[Vec<f64>], resp: &[Vec<f64>]) {
    let k = model.n_components();
    let widest = (0..k)
        .filter(|&c| c != dead)
        .max_by(|&a, &b| {
            let va: f64 = model.variances[a].iter().sum();
            let vb: f64 = model.variances[b].iter().sum();
            va.total_cmp(&vb)
        })
        .unwrap_or(dead);
    let members: Vec<usize> = (0..vectors.len())
        .filter(|&i| argmax(&resp[i]) == widest)
        .collect();
    let pool: Vec<usize> = if members.is_empty() {
        (0..vectors.len()).collect()
    } else {
        members
    };
    let far = pool
        .into_iter()
        .max_by(|&a, &b| {
            let da = sq_dist(&vectors[a], &model.means[widest]);
            let db = sq_dist(&vectors[b], &model.means[widest]);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("at least one point");
    model.means[dead] = vectors[far].clone();
    model.variances[dead] = model.variances[widest].clone();
    model.weights[dead] = 1.0 / k as f64;
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Hard component ids (lowest index on ties) and the responsibility matrix.
pub fn gmm_assign(model: &ClusterModel, vectors: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let d = check_vectors(vectors)?;
    if d != model.dim() {
        return Err(Error::Input(format!("vectors have length {d}, model expects {}", model.dim())));
    }
    let resp: Vec<Vec<f64>> = vectors.iter().map(|v| model.posterior(v).0).collect();
    Ok((resp.iter().map(|r| argmax(r)).collect(), resp))
}
