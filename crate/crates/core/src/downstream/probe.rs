//! L2-regularized logistic regression, fitted by Newton's method.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAX_NEWTON_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Bias first, then one weight per standardized feature.
    coef: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    /// Fits on rows `x` with binary labels; `l2` penalizes all weights but the bias.
    pub fn fit(x: &[Vec<f64>], y: &[u8], l2: f64) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::Input(format!("probe needs matching rows and labels, got {n} and {}", y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Input("probe rows have different lengths".into()));
        }
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for r in x {
            for j in 0..d {
                scale[j] += (r[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let design = DMatrix::from_fn(n, d + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (x[i][j - 1] - mean[j - 1]) / scale[j - 1]
            }
        });
        let target = DVector::from_iterator(n, y.iter().map(|&v| f64::from(v)));
        let mut beta = DVector::zeros(d + 1);
        let mut penalty = DMatrix::identity(d + 1, d + 1) * l2;
        penalty[(0, 0)] = 0.0;
        for _ in 0..MAX_NEWTON_STEPS {
            let p = (&design * &beta).map(sigmoid);
            let mut grad = design.transpose() * (&p - &target) + &penalty * &beta;
            let w = p.map(|v| (v * (1.0 - v)).max(1e-10));
            let weighted = DMatrix::from_fn(n, d + 1, |i, j| design[(i, j)] * w[i]);
            // a tiny ridge on the bias keeps the Hessian invertible on separable data
            let hessian = design.transpose() * weighted + &penalty + DMatrix::identity(d + 1, d + 1) * 1e-9;
            let Some(chol) = hessian.cholesky() else {
                return Err(Error::Numeric("probe Hessian is not positive definite".into()));
            };
            chol.solve_mut(&mut grad);
            beta -= &grad;
            if grad.amax() < 1e-9 {
                break;
            }
        }
        Ok(Self {
            mean,
            scale,
            coef: beta.iter().copied().collect(),
        })
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        let z = self.coef[0]
            + row
                .iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.coef[1..])
                .map(|(((v, m), s), c)| (v - m) / s * c)
                .sum::<f64>();
        sigmoid(z)
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.probability(row) >= 0.5)
    }
}

/// Default ridge strength of the modality probe.
pub const PROBE_L2: f64 = 1.0;

/// Mean held-out accuracy over `k` folds. `groups[i]` names the fold unit of
/// row `i`; rows sharing a group always land in the same fold.
pub fn kfold_accuracy(x: &[Vec<f64>], y: &[u8], groups: &[usize], k: usize, l2: f64) -> Result<f64> {
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    if n_groups < k {
        return Err(Error::Input(format!("{n_groups} groups cannot fill {k} folds")));
    }
    let mut correct = 0usize;
    for fold in 0..k {
        let is_test = |i: usize| groups[i] % k == fold;
        let (mut xt, mut yt) = (Vec::new(), Vec::new());
        for i in (0..x.len()).filter(|&i| !is_test(i)) {
            xt.push(x[i].clone());
            yt.push(y[i]);
        }
        let probe = LogisticProbe::fit(&xt, &yt, l2)?;
        correct += (0..x.len())
            .filter(|&i| is_test(i) && probe.predict(&x[i]) == y[i])
            .count();
    }
    Ok(correct as f64 / x.len() as f64)
}
