//! Parameter initialisation and the small layer vocabulary shared by the
//! encoder and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated at two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let s: f64 = normal.sample(rng);
            if s.abs() <= 2.0 * std {
                break s;
            }
        };
    }
    t
}

fn param(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

/// Registers `{prefix}.weight` `[fan_in × fan_out]` and `{prefix}.bias`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.weight"),
        param(truncated_normal(rng, &[fan_in, fan_out], INIT_STD)),
    )?;
    store.insert(format!("{prefix}.bias"), param(Tensor::zeros(&[fan_out])))
}

/// A bias-free projection `x · W`.
pub fn init_projection<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.weight"),
        param(truncated_normal(rng, &[fan_in, fan_out], INIT_STD)),
    )
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), param(Tensor::full(&[dim], 1.0)))?;
    store.insert(format!("{prefix}.beta"), param(Tensor::zeros(&[dim])))
}

/// Batch-norm affine parameters share the layer-norm layout.
pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    init_layer_norm(store, prefix, dim)
}

/// `x · W + b` for row-major `x`.
pub fn linear(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let xw = g.matmul(x, w)?;
    g.add_broadcast(xw, b)
}

pub fn projection(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    g.matmul(x, w)
}

pub fn layer_norm(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

pub fn batch_norm(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    g.batch_norm(x, gamma, beta, eps)
}
