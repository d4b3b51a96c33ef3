//! The self-balancing loss over per-field reconstruction terms.
//!
//! Each feature field carries a learnable log-difficulty scalar `s^i`
//! (log-variance of a per-field homoscedastic uncertainty). The aggregate
//! objective is `Σ_i [exp(−s^i)·ℓ^i + s^i/2]` plus the label loss with
//! coefficient 1. In `s` the objective is strictly convex with the unique
//! minimizer `s* = log(2ℓ)`, and plain gradient descent contracts towards it
//! with factor `|1 − η/2|` near the equilibrium. Fields with no masked
//! occurrence in a batch are skipped entirely (loss term and regularizer).

use crate::error::{Error, Result};

/// Per-field batch losses. `None` marks a field with no masked occurrence.
#[derive(Debug, Clone)]
pub struct FieldLosses {
    pub per_field: Vec<Option<f64>>,
    pub label: f64,
}

/// `Σ over present fields of exp(−s^i)·ℓ^i + s^i/2`, plus the label loss.
pub fn self_balancing_loss(losses: &FieldLosses, s: &[f64]) -> f64 {
    assert_eq!(losses.per_field.len(), s.len());
    let mut total = losses.label;
    for (l, &si) in losses.per_field.iter().zip(s) {
        if let Some(l) = l {
            total += (-si).exp() * l + si / 2.0;
        }
    }
    total
}

/// Uniform-weight aggregate: `Σ ℓ^i + ℓ_label`.
pub fn uniform_loss(losses: &FieldLosses) -> f64 {
    losses.label + losses.per_field.iter().flatten().sum::<f64>()
}

/// Analytic loss-path gradient `∂ℒ/∂s^i = 1/2 − exp(−s^i)·ℓ^i`.
/// Absent fields get gradient 0.
pub fn grad_s(losses: &FieldLosses, s: &[f64]) -> Vec<f64> {
    losses
        .per_field
        .iter()
        .zip(s)
        .map(|(l, &si)| match l {
            Some(l) => 0.5 - (-si).exp() * l,
            None => 0.0,
        })
        .collect()
}

/// The unique minimizer `s* = log(2ℓ)` of the per-field objective.
pub fn equilibrium_s(loss: f64) -> Result<f64> {
    if loss <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "equilibrium undefined for loss {loss} <= 0"
        )));
    }
    Ok((2.0 * loss).ln())
}

/// Gradient descent on `s` with the field loss held fixed; returns the full
/// trajectory including the start point.
pub fn converge_s(loss: f64, s0: f64, eta: f64, steps: usize) -> Vec<f64> {
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut s = s0;
    trajectory.push(s);
    for _ in 0..steps {
        let g = 0.5 - (-s).exp() * loss;
        s -= eta * g;
        trajectory.push(s);
    }
    trajectory
}

/// `∂²ℒ/∂(s^i)² = exp(−s^i)·ℓ^i`, strictly positive whenever ℓ > 0.
pub fn second_derivative_s(loss: f64, s: f64) -> f64 {
    (-s).exp() * loss
}

/// Normalized difficulty `d^i(τ) = ℓ^i(τ) / ℓ^i(0)` against the first-epoch
/// reference losses.
pub fn normalized_difficulty(current: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if current.len() != reference.len() {
        return Err(Error::InvalidArgument("difficulty vectors differ in length".into()));
    }
    reference
        .iter()
        .zip(current)
        .map(|(&l0, &l)| {
            if l0 <= 0.0 {
                Err(Error::InvalidArgument(format!(
                    "reference loss {l0} must be positive"
                )))
            } else {
                Ok(l / l0)
            }
        })
        .collect()
}
