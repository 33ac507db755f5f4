//! Gated-attention multiple-instance classifier over frozen embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    /// One embedding per instance; all of equal length.
    pub instances: Vec<Vec<f64>>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbmilConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for AbmilConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

/// Trained weights. Inputs are standardized with the training-set moments
/// before the attention network sees them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbmilParams {
    pub dim: usize,
    pub hidden: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `hidden × dim` tanh branch and its bias.
    pub v: Vec<f64>,
    pub bv: Vec<f64>,
    /// `hidden × dim` sigmoid gate and its bias.
    pub u: Vec<f64>,
    pub bu: Vec<f64>,
    /// Attention scoring vector.
    pub w: Vec<f64>,
    /// Classifier on the pooled embedding.
    pub c: Vec<f64>,
    pub b: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, computed stably.
fn bce_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

struct Forward {
    x: Vec<f64>,
    hv: Vec<f64>,
    hu: Vec<f64>,
    attention: Vec<f64>,
    pooled: Vec<f64>,
    logit: f64,
}

impl AbmilParams {
    fn init(dim: usize, hidden: usize, mean: Vec<f64>, scale: Vec<f64>, rng: &mut ChaCha8Rng) -> Self {
        let mut glorot = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        };
        Self {
            dim,
            hidden,
            mean,
            scale,
            v: glorot(dim, hidden, hidden * dim),
            bv: vec![0.0; hidden],
            u: glorot(dim, hidden, hidden * dim),
            bu: vec![0.0; hidden],
            w: glorot(hidden, 1, hidden),
            c: glorot(dim, 1, dim),
            b: 0.0,
        }
    }

    fn forward(&self, bag: &[Vec<f64>]) -> Forward {
        let (d, h, n) = (self.dim, self.hidden, bag.len());
        let mut x = Vec::with_capacity(n * d);
        for inst in bag {
            x.extend(inst.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s));
        }
        let mut hv = vec![0.0; n * h];
        let mut hu = vec![0.0; n * h];
        let mut scores = vec![0.0; n];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            for j in 0..h {
                let dot = |m: &[f64]| m[j * d..(j + 1) * d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                hv[i * h + j] = (dot(&self.v) + self.bv[j]).tanh();
                hu[i * h + j] = sigmoid(dot(&self.u) + self.bu[j]);
                scores[i] += self.w[j] * hv[i * h + j] * hu[i * h + j];
            }
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut attention: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = attention.iter().sum();
        attention.iter_mut().for_each(|a| *a /= z);
        let mut pooled = vec![0.0; d];
        for i in 0..n {
            for (p, v) in pooled.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *p += attention[i] * v;
            }
        }
        let logit = self.b + self.c.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        Forward {
            x,
            hv,
            hu,
            attention,
            pooled,
            logit,
        }
    }

    /// Gradient of the bag's cross-entropy, in the layout of `flat()`.
    fn gradient(&self, f: &Forward, y: f64) -> Vec<f64> {
        let (d, h, n) = (self.dim, self.hidden, f.attention.len());
        let dlogit = sigmoid(f.logit) - y;
        let mut g = Gradient::zeros(d, h);
        g.b = dlogit;
        for (gc, p) in g.c.iter_mut().zip(&f.pooled) {
            *gc = dlogit * p;
        }
        let da: Vec<f64> = (0..n)
            .map(|i| dlogit * self.c.iter().zip(&f.x[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mean_da: f64 = f.attention.iter().zip(&da).map(|(a, b)| a * b).sum();
        for i in 0..n {
            let ds = f.attention[i] * (da[i] - mean_da);
            let xi = &f.x[i * d..(i + 1) * d];
            for j in 0..h {
                let (tv, su) = (f.hv[i * h + j], f.hu[i * h + j]);
                g.w[j] += ds * tv * su;
                let dg = ds * self.w[j];
                let dpv = dg * su * (1.0 - tv * tv);
                let dpu = dg * tv * su * (1.0 - su);
                g.bv[j] += dpv;
                g.bu[j] += dpu;
                for k in 0..d {
                    g.v[j * d + k] += dpv * xi[k];
                    g.u[j * d + k] += dpu * xi[k];
                }
            }
        }
        g.flat()
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.v.len() * 2 + self.hidden * 3 + self.dim + 1);
        for part in [&self.v, &self.bv, &self.u, &self.bu, &self.w, &self.c] {
            out.extend_from_slice(part);
        }
        out.push(self.b);
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for part in [&mut self.v, &mut self.bv, &mut self.u, &mut self.bu, &mut self.w, &mut self.c] {
            let n = part.len();
            part.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        self.b = flat[at];
    }

    /// Flat mask of entries subject to weight decay (matrices only).
    fn decay_mask(&self) -> Vec<bool> {
        let mut m = Vec::new();
        for (len, decay) in [
            (self.v.len(), true),
            (self.bv.len(), false),
            (self.u.len(), true),
            (self.bu.len(), false),
            (self.w.len(), true),
            (self.c.len(), true),
            (1, false),
        ] {
            m.extend(std::iter::repeat_n(decay, len));
        }
        m
    }

    pub fn loss(&self, bag: &Bag) -> f64 {
        bce_logit(self.forward(&bag.instances).logit, f64::from(bag.label))
    }
}

struct Gradient {
    v: Vec<f64>,
    bv: Vec<f64>,
    u: Vec<f64>,
    bu: Vec<f64>,
    w: Vec<f64>,
    c: Vec<f64>,
    b: f64,
}

impl Gradient {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            v: vec![0.0; h * d],
            bv: vec![0.0; h],
            u: vec![0.0; h * d],
            bu: vec![0.0; h],
            w: vec![0.0; h],
            c: vec![0.0; d],
            b: 0.0,
        }
    }

    fn flat(self) -> Vec<f64> {
        let mut out = Vec::new();
        for part in [self.v, self.bv, self.u, self.bu, self.w, self.c] {
            out.extend(part);
        }
        out.push(self.b);
        out
    }
}

fn check_bags(bags: &[Bag]) -> Result<usize> {
    let dim = bags
        .first()
        .and_then(|b| b.instances.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Input("no bags or an empty first bag".into()))?;
    for b in bags {
        if b.instances.is_empty() {
            return Err(Error::Input(format!("bag {} has no instances", b.slide_id)));
        }
        if b.instances.iter().any(|i| i.len() != dim) {
            return Err(Error::Input(format!("bag {} mixes embedding sizes", b.slide_id)));
        }
        if b.label > 1 {
            return Err(Error::Input(format!("bag {} has label {}", b.slide_id, b.label)));
        }
    }
    Ok(dim)
}

/// Trains on `train`, early-stopping on `val` loss (when `val` is non-empty)
/// and returning the best-validation weights.
pub fn abmil_train(train: &[Bag], val: &[Bag], config: &AbmilConfig) -> Result<AbmilParams> {
    let dim = check_bags(train)?;
    if !val.is_empty() && check_bags(val)? != dim {
        return Err(Error::Input("validation bags have a different embedding size".into()));
    }
    if !(train.iter().any(|b| b.label == 0) && train.iter().any(|b| b.label == 1)) {
        return Err(Error::Training("training bags all carry the same label".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let count = train.iter().map(|b| b.instances.len()).sum::<usize>() as f64;
    let mut mean = vec![0.0; dim];
    for inst in train.iter().flat_map(|b| &b.instances) {
        for (m, v) in mean.iter_mut().zip(inst) {
            *m += v / count;
        }
    }
    let mut scale = vec![0.0; dim];
    for inst in train.iter().flat_map(|b| &b.instances) {
        for k in 0..dim {
            scale[k] += (inst[k] - mean[k]).powi(2) / count;
        }
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let mut params = AbmilParams::init(dim, config.hidden, mean, scale, &mut rng);
    let mut theta = params.flat();
    let decay = params.decay_mask();
    let (mut m, mut v) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, params.clone());
    let mut stale = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let f = params.forward(&train[i].instances);
            let g = params.gradient(&f, f64::from(train[i].label));
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for k in 0..theta.len() {
                if decay[k] {
                    theta[k] -= config.lr * config.weight_decay * theta[k];
                }
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                theta[k] -= config.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            params.set_flat(&theta);
        }
        if val.is_empty() {
            continue;
        }
        let loss = val.iter().map(|b| params.loss(b)).sum::<f64>() / val.len() as f64;
        if loss < best.0 {
            best = (loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(if val.is_empty() { params } else { best.1 })
}

/// Positive-class probability and the per-instance attention weights.
pub fn abmil_predict(params: &AbmilParams, bag: &Bag) -> Result<(f64, Vec<f64>)> {
    if bag.instances.is_empty() {
        return Err(Error::Input(format!("bag {} has no instances", bag.slide_id)));
    }
    if bag.instances.iter().any(|i| i.len() != params.dim) {
        return Err(Error::Input(format!(
            "bag {} does not match the model's embedding size {}",
            bag.slide_id, params.dim
        )));
    }
    let f = params.forward(&bag.instances);
    Ok((sigmoid(f.logit), f.attention))
}
