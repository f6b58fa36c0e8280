use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{is_buffer, ModelParams};
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v ← m·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable tensor of `params`; `grads` must hold an
    /// equally shaped gradient for each of them.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, w) in params.iter() {
            if is_buffer(name) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Alignment(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != w.shape() {
                return Err(Error::Alignment(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        for (name, w) in params.iter_mut() {
            if is_buffer(name) {
                continue;
            }
            let g = grads[name.as_str()].data();
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((wv, gv), vv) in w.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gv + self.weight_decay * *wv;
                *vv = self.momentum * *vv + d;
                *wv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
