//! 2-D projections of embeddings for plotting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    Pca,
    /// Exact t-SNE.
    NeighborEmbedding,
}

impl fmt::Display for ProjectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pca => "pca",
            Self::NeighborEmbedding => "neighbor-embedding",
        })
    }
}

impl FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Self::Pca),
            "neighbor-embedding" | "tsne" => Ok(Self::NeighborEmbedding),
            other => Err(Error::Input(format!("unknown projection method {other:?}"))),
        }
    }
}

fn check(vectors: &[Vec<f64>]) -> Result<usize> {
    if vectors.len() < 3 {
        return Err(Error::Input(format!("projection needs at least 3 points, got {}", vectors.len())));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("vectors must share one nonzero length".into()));
    }
    Ok(d)
}

/// Principal components of the centered data, largest variance first, and
/// the matching eigenvalues of the (population) covariance.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit component vectors; the largest-magnitude entry of each is positive.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let d = check(vectors)?;
        let n = vectors.len();
        let mut mean = vec![0.0; d];
        for v in vectors {
            for j in 0..d {
                mean[j] += v[j] / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(d);
        let mut variances = Vec::with_capacity(d);
        for k in order {
            let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
            variances.push(eig.eigenvalues[k].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn transform(&self, v: &[f64], dims: usize) -> Vec<f64> {
        self.components[..dims]
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }
}

const TSNE_PERPLEXITY: f64 = 30.0;
const TSNE_ITERS: usize = 500;

/// Row-conditional affinities with per-point bandwidth found by bisection
/// to match the target perplexity, then symmetrized.
fn tsne_affinities(d2: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = d2.len();
    let target = perplexity.min((n - 1) as f64 / 3.0).max(1.0).ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            let dmin = (0..n).filter(|&j| j != i).map(|j| d2[i][j]).fold(f64::INFINITY, f64::min);
            for j in 0..n {
                if j == i {
                    p[i][j] = 0.0;
                    continue;
                }
                let w = (-(d2[i][j] - dmin) * beta).exp();
                p[i][j] = w;
                sum += w;
                weighted += w * (d2[i][j] - dmin);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            p[i].iter_mut().for_each(|v| *v /= sum);
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut sym = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sym[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    sym
}

fn tsne(vectors: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let n = vectors.len();
    let d2: Vec<Vec<f64>> = vectors
        .iter()
        .map(|a| vectors.iter().map(|b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()).collect())
        .collect();
    let p = tsne_affinities(&d2, TSNE_PERPLEXITY);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let lr = (n as f64 / 12.0).max(50.0);
    for it in 0..TSNE_ITERS {
        let exaggeration = if it < 100 { 12.0 } else { 1.0 };
        let momentum = if it < 100 { 0.5 } else { 0.8 };
        let mut num = vec![vec![0.0; n]; n];
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i][j] = q;
                num[j][i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let coeff = 4.0 * (exaggeration * p[i][j] - num[i][j] / z) * num[i][j];
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                // delta-bar-delta step-size gains
                gains[i][a] = if (g[a] > 0.0) != (velocity[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                velocity[i][a] = momentum * velocity[i][a] - lr * gains[i][a] * g[a];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        let (mx, my) = (
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        );
        y.iter_mut().for_each(|p| {
            p[0] -= mx;
            p[1] -= my;
        });
    }
    y
}

/// Projects each vector to 2-D. PCA ignores `seed`.
pub fn project_2d(vectors: &[Vec<f64>], method: ProjectionMethod, seed: u64) -> Result<Vec<[f64; 2]>> {
    let d = check(vectors)?;
    match method {
        ProjectionMethod::Pca => {
            let pca = Pca::fit(vectors)?;
            let dims = d.min(2);
            Ok(vectors
                .iter()
                .map(|v| {
                    let t = pca.transform(v, dims);
                    [t[0], t.get(1).copied().unwrap_or(0.0)]
                })
                .collect())
        }
        ProjectionMethod::NeighborEmbedding => Ok(tsne(vectors, seed)),
    }
}
