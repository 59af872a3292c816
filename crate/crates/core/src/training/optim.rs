use std::collections::HashMap;
use std::f64::consts::PI;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Cosine decay from `base` at epoch 0 towards 0 at `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} must be in [0, 1) and weight decay {weight_decay} >= 0"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        })
    }

    /// Applies accumulated gradients of every trainable parameter, then
    /// clears them.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        self.step_scaled(params, lr, |_| 1.0)
    }

    /// As [`Sgd::step`], with the learning rate of each parameter multiplied
    /// by `scale(name)`.
    pub fn step_scaled(&mut self, params: &mut ParamStore, lr: f64, scale: impl Fn(&str) -> f64) -> Result<()> {
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let grad = match t.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let lr = lr * scale(name);
            for ((vi, gi), wi) in v.iter_mut().zip(&grad).zip(t.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
            if t.data().iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite("sgd step"));
            }
        }
        params.zero_grads();
        Ok(())
    }
}
