//! Projection heads, the domain classifier and the shared MLP runner they use.

use crate::error::Result;
use crate::nn::layers::{
    gelu, gelu_backward, l2_normalize_rows, l2_normalize_rows_backward, linear, linear_backward, relu,
    relu_backward, weight_norm_linear, weight_norm_linear_backward, RowNormCache, WeightNormCache,
};
use crate::nn::{Grads, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, x: Vec<T>) -> Vec<T> {
        match self {
            Activation::Gelu => gelu(&x),
            Activation::Relu => relu(&x),
            Activation::Identity => x,
        }
    }

    fn backward<T: Real>(self, pre: &[T], dy: Vec<T>) -> Vec<T> {
        match self {
            Activation::Gelu => gelu_backward(pre, &dy),
            Activation::Relu => relu_backward(pre, &dy),
            Activation::Identity => dy,
        }
    }
}

/// A stack of linear layers, each followed by its activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(String, Activation)>,
}

pub struct MlpCache<T> {
    rows: usize,
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl Mlp {
    pub fn new(layers: Vec<(String, Activation)>) -> Self {
        Self { layers }
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &[T], rows: usize) -> Result<(Vec<T>, MlpCache<T>)> {
        let mut cur = x.to_vec();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (name, act) in &self.layers {
            let y = linear(params, name, &cur, rows)?;
            inputs.push(cur);
            cur = act.apply(y.clone());
            pre.push(y);
        }
        Ok((cur, MlpCache { rows, inputs, pre }))
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &MlpCache<T>,
        dy: &[T],
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Vec<T>>> {
        let mut d = dy.to_vec();
        for (i, (name, act)) in self.layers.iter().enumerate().rev() {
            let d_pre = act.backward(&cache.pre[i], d);
            let want_dx = need_dx || i > 0;
            match linear_backward(params, name, &cache.inputs[i], cache.rows, &d_pre, grads, want_dx)? {
                Some(dx) => d = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(d))
    }
}

/// Self-distillation head: two GELU layers, row L2 normalization, then a
/// weight-normalized output layer producing `proj_dim_dino` logits.
pub struct DinoHead {
    mlp: Mlp,
    last: String,
}

pub struct DinoHeadCache<T> {
    mlp: MlpCache<T>,
    norm: RowNormCache<T>,
    last: WeightNormCache<T>,
}

impl DinoHead {
    pub fn new(prefix: &str) -> Self {
        Self {
            mlp: Mlp::new(vec![
                (format!("{prefix}.dino_head.fc1"), Activation::Gelu),
                (format!("{prefix}.dino_head.fc2"), Activation::Gelu),
            ]),
            last: format!("{prefix}.dino_head.last"),
        }
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &[T],
        rows: usize,
    ) -> Result<(Vec<T>, DinoHeadCache<T>)> {
        let (h, mlp) = self.mlp.forward(params, x, rows)?;
        let cols = h.len() / rows.max(1);
        let norm = l2_normalize_rows(&h, cols, 1e-12);
        let (logits, last) = weight_norm_linear(params, &self.last, norm.normalized(), rows)?;
        Ok((logits, DinoHeadCache { mlp, norm, last }))
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        cache: &DinoHeadCache<T>,
        d_logits: &[T],
        grads: &mut Grads<T>,
    ) -> Result<Vec<T>> {
        let rows = cache.mlp.rows;
        let du = weight_norm_linear_backward(
            params,
            &self.last,
            &cache.last,
            cache.norm.normalized(),
            rows,
            d_logits,
            grads,
        )?;
        let cols = du.len() / rows.max(1);
        let dh = l2_normalize_rows_backward(&cache.norm, &du, cols);
        Ok(self
            .mlp
            .backward(params, &cache.mlp, &dh, grads, true)?
            .expect("dx requested"))
    }
}

pub fn contrast_head(prefix: &str) -> Mlp {
    Mlp::new(vec![
        (format!("{prefix}.contrast_head.fc1"), Activation::Gelu),
        (format!("{prefix}.contrast_head.fc2"), Activation::Identity),
    ])
}

pub fn domain_classifier() -> Mlp {
    Mlp::new(vec![
        ("domain.fc1".to_string(), Activation::Relu),
        ("domain.fc2".to_string(), Activation::Identity),
    ])
}
