use std::collections::BTreeMap;

use super::config::OptimizerConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Grads, ParamSet};

/// First and second moments plus the update count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub steps: u64,
}

/// Adam with decoupled weight decay. Only parameters that received a
/// gradient are touched; parameters with fewer than two axes (biases, norm
/// gains, tokens) are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        let c = &self.config;
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != tensor.len() {
                return Err(shape_err!("gradient for {name} has {} values, parameter {}", g.len(), tensor.len()));
            }
            let decay = tensor.shape().len() >= 2;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let lr = c.lr as f32;
            let wd = if decay { (c.lr * c.weight_decay) as f32 } else { 0.0 };
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            let (bc1, bc2, eps) = (bc1 as f32, bc2 as f32, c.eps as f32);
            for (((p, &gi), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= wd * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        params.insert("b", Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let mut grads = Grads::new();
        grads.slot("w", 2).copy_from_slice(&[3.0, -0.2]);
        let mut opt = AdamW::new(OptimizerConfig {
            weight_decay: 0.0,
            lr: 0.01,
            ..OptimizerConfig::default()
        });
        opt.update(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
        // no gradient, no change, no state
        assert_eq!(params.get("b").unwrap().data(), &[0.5, 0.5]);
        assert!(!opt.state.contains_key("b"));
    }
}
