use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything that owns named trainable tensors.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// One bias-corrected Adam update over every parameter of `model`.
    /// Weight decay is added to the gradient (L2 form).
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &Gradients) -> Result<()> {
        let mut missing = None;
        model.visit_params(&mut |name, p| {
            if missing.is_none() {
                match grads.get(name) {
                    None => missing = Some(format!("no gradient for parameter `{name}`")),
                    Some(g) if g.shape() != p.shape() => {
                        missing = Some(format!(
                            "gradient for `{name}` has shape {:?}, parameter {:?}",
                            g.shape(),
                            p.shape()
                        ))
                    }
                    _ => {}
                }
            }
        });
        if let Some(msg) = missing {
            return Err(Error::Contract(msg));
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let first = &mut self.first;
        let second = &mut self.second;
        model.visit_params_mut(&mut |name, p| {
            let g = &grads[name];
            let (r, c) = p.dims();
            let m = first.entry(name.to_string()).or_insert_with(|| Tensor::zeros(r, c));
            let v = second.entry(name.to_string()).or_insert_with(|| Tensor::zeros(r, c));
            let params = p.values_mut();
            for (((w, &gi), mi), vi) in params
                .iter_mut()
                .zip(g.values())
                .zip(m.values_mut())
                .zip(v.values_mut())
            {
                let gi = gi + wd * *w;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
