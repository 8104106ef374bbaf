//! Gradients and Hessian-vector products of closures over parameter lists.

use super::{Graph, Var};
use crate::error::{Result, SpeftError};
use crate::tensor::Tensor;

/// Relative finite-difference step for [`hessian_vector_product`].
pub const HVP_DELTA: f64 = 1e-4;

/// Gradient of `loss_fn` at `theta`. The closure receives trainable leaves
/// bound to `theta` in order and must return a scalar loss.
pub fn gradient_of<F>(mut loss_fn: F, theta: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = theta.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|v| g.grad_or_zeros(*v)).collect())
}

/// Step used by the central difference: `δ (1 + ‖θ‖∞) / max(‖v‖∞, tiny)`.
pub fn hvp_step_size(theta: &[Tensor], v: &[Tensor]) -> f64 {
    let theta_inf = theta.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let v_inf = v.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    HVP_DELTA * (1.0 + theta_inf) / v_inf.max(f64::MIN_POSITIVE)
}

/// `H v ≈ (∇(θ + εv) − ∇(θ − εv)) / 2ε` for any gradient routine.
///
/// A zero `v` yields a zero result without evaluating the gradient.
pub fn hvp_with<G>(mut grad_fn: G, theta: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    G: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    check_conformant(theta, v)?;
    if v.iter().all(|t| t.max_abs() == 0.0) {
        return Ok(theta.iter().map(|t| Tensor::zeros(t.shape())).collect());
    }
    let eps = hvp_step_size(theta, v);
    let shifted = |sign: f64| -> Result<Vec<Tensor>> {
        theta
            .iter()
            .zip(v)
            .map(|(t, d)| t.zip_map(d, |a, b| a + sign * eps * b))
            .collect()
    };
    let plus = grad_fn(&shifted(1.0)?)?;
    let minus = grad_fn(&shifted(-1.0)?)?;
    let out: Vec<Tensor> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| p.zip_map(m, |a, b| (a - b) / (2.0 * eps)))
        .collect::<Result<_>>()?;
    if out.iter().any(|t| !t.is_finite()) {
        return Err(SpeftError::StepSizeFailure { eps });
    }
    Ok(out)
}

/// Hessian-vector product by central differences of gradients (the reference path).
pub fn hessian_vector_product<F>(mut loss_fn: F, theta: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    hvp_with(|t| gradient_of(&mut loss_fn, t), theta, v)
}

/// Exact Hessian-vector product by differentiating `⟨∇ℓ, v⟩` a second time.
/// Only available when every op in the loss supports second order.
pub fn hessian_vector_product_exact<F>(
    mut loss_fn: F,
    theta: &[Tensor],
    v: &[Tensor],
) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    check_conformant(theta, v)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = theta.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.grad_graph(loss, &vars)?;
    let mut total: Option<Var> = None;
    for (gv, dir) in grads.iter().zip(v) {
        let d = g.constant(dir.clone());
        let prod = g.mul(*gv, d)?;
        let s = g.sum(prod)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let Some(total) = total else {
        return Ok(Vec::new());
    };
    if !g.requires_grad(total) {
        return Ok(theta.iter().map(|t| Tensor::zeros(t.shape())).collect());
    }
    g.backward(total)?;
    Ok(vars.iter().map(|v| g.grad_or_zeros(*v)).collect())
}

fn check_conformant(theta: &[Tensor], v: &[Tensor]) -> Result<()> {
    if theta.len() != v.len() {
        return Err(SpeftError::ShapeMismatch {
            op: "hessian_vector_product",
            lhs: vec![theta.len()],
            rhs: vec![v.len()],
        });
    }
    for (t, d) in theta.iter().zip(v) {
        if t.shape() != d.shape() {
            return Err(SpeftError::ShapeMismatch {
                op: "hessian_vector_product",
                lhs: t.shape().to_vec(),
                rhs: d.shape().to_vec(),
            });
        }
    }
    Ok(())
}
