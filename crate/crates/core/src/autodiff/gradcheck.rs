//! Central finite-difference gradient checking.
//!
//! Derivatives use the fourth-order central stencil
//! `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, whose truncation error
//! stays far below the tolerance even where a gradient element is small.

use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    Ok(())
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let (m2, m1, p1, p2) = (f(-2.0 * eps)?, f(-eps)?, f(eps)?, f(2.0 * eps)?);
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps))
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    g.scalar(out).map_err(|_| {
        Error::Contract(format!(
            "gradient check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        ))
    })
}

/// Compares the reverse-mode gradient of `f` at `x` with central finite
/// differences and returns the largest elementwise relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let xv = g.input(&x.clone().with_requires_grad(true))?;
    let out = f(&mut g, xv)?;
    scalar_output(&g, out)?;
    let analytic = g.backward(out)?.get_or_zeros(xv, x.numel());

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant_raw(x.shape().to_vec(), data)?;
        let out = f(&mut g, xv)?;
        scalar_output(&g, out)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = central_difference(
            |h| {
                let mut shifted = x.data().to_vec();
                shifted[i] += h;
                eval(shifted)
            },
            eps,
        )?;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter worst relative error from [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Gradient check over every trainable tensor of a parameter store.
pub fn grad_check_params<F>(f: F, params: &ParamStore, eps: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let out = f(&mut g, &bound)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;

    let mut frozen = params.clone();
    frozen.set_trainable(|_| false);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g)?;
        let out = f(&mut g, &bound)?;
        scalar_output(&g, out)
    };

    let mut report = Vec::new();
    for (name, t) in params.iter() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads.get_or_zeros(bound.get(name)?, t.numel());
        let mut worst = 0.0f64;
        for i in 0..t.numel() {
            let base = t.data()[i];
            let numeric = central_difference(
                |h| {
                    frozen.get_mut(name)?.data_mut()[i] = base + h;
                    eval(&frozen)
                },
                eps,
            )?;
            frozen.get_mut(name)?.data_mut()[i] = base;
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(&[0.5, -0.5]);
        let err = grad_check(
            |g, _x| {
                let c = g.constant(&Tensor::scalar(4.0))?;
                g.sum(c)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn vector_output_is_a_contract_error() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let res = grad_check(|g, x| g.scale(x, 2.0), &x, 1e-4);
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn step_size_is_validated() {
        let x = Tensor::vector(&[1.0]);
        assert!(grad_check(|g, x| g.sum(x), &x, 1e-2).is_err());
        assert!(grad_check(|g, x| g.sum(x), &x, 1e-7).is_err());
    }
}
