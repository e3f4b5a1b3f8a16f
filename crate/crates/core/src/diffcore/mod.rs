//! Dense tensors and reverse-mode differentiation with second-order support.
//!
//! The functional entry points take losses written against a [`Tape`]: a
//! closure receives one leaf per parameter block and returns a scalar node.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{log_sum_exp, Tensor};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Flat parameter storage with per-block matrix shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(shapes: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self, DiffError> {
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if total != values.len() {
            return Err(DiffError::InvalidParams(format!(
                "{} values for blocks totalling {total}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(DiffError::InvalidParams(format!(
                "non-finite value at position {bad}"
            )));
        }
        Ok(Self { values, shapes })
    }

    pub fn zeros(shapes: Vec<(usize, usize)>) -> Self {
        let total = shapes.iter().map(|(r, c)| r * c).sum();
        Self {
            values: vec![0.0; total],
            shapes,
        }
    }

    pub fn from_blocks(blocks: &[Tensor]) -> Self {
        let shapes = blocks.iter().map(Tensor::shape).collect();
        let values = blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
        Self { values, shapes }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn blocks(&self) -> Vec<Tensor> {
        let mut offset = 0;
        self.shapes
            .iter()
            .map(|&(r, c)| {
                let block = Tensor::from_vec(r, c, self.values[offset..offset + r * c].to_vec());
                offset += r * c;
                block
            })
            .collect()
    }

    /// Registers every block as a leaf on `tape`.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.blocks().into_iter().map(|b| tape.leaf(b)).collect()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            shapes: self.shapes.clone(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

fn collect_grads(tape: &Tape, grads: &[Var], like: &ParamVector) -> ParamVector {
    let blocks: Vec<Tensor> = grads.iter().map(|g| tape.value(*g).clone()).collect();
    let out = ParamVector::from_blocks(&blocks);
    debug_assert_eq!(out.shapes, like.shapes);
    out
}

/// Value of a scalar loss at `at`.
pub fn value<F>(loss: F, at: &ParamVector) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves = at.leaves(&mut tape);
    let out = loss(&mut tape, &leaves);
    tape.check()?;
    Ok(tape.scalar(out))
}

/// Loss value and its gradient with respect to every parameter block.
pub fn value_and_grad<F>(loss: F, at: &ParamVector) -> Result<(f64, ParamVector), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves = at.leaves(&mut tape);
    let out = loss(&mut tape, &leaves);
    let grads = tape.grad(out, &leaves);
    tape.check()?;
    Ok((tape.scalar(out), collect_grads(&tape, &grads, at)))
}

pub fn grad<F>(loss: F, at: &ParamVector) -> Result<ParamVector, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    value_and_grad(loss, at).map(|(_, g)| g)
}

/// Gradient with respect to `outer` of `||d inner_loss / d inner||^2`.
///
/// The inner gradient is recorded on the tape and differentiated again.
pub fn grad_norm_sq_grad<F>(
    inner_loss: F,
    inner_at: &ParamVector,
    outer_at: &ParamVector,
) -> Result<ParamVector, DiffError>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let inner = inner_at.leaves(&mut tape);
    let outer = outer_at.leaves(&mut tape);
    let loss = inner_loss(&mut tape, &inner, &outer);
    let inner_grads = tape.grad(loss, &inner);
    let penalty = grad_norm_sq(&mut tape, &inner_grads);
    let grads = tape.grad(penalty, &outer);
    tape.check()?;
    Ok(collect_grads(&tape, &grads, outer_at))
}

/// `sum_i ||g_i||^2` as a scalar node.
pub fn grad_norm_sq(tape: &mut Tape, grads: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for &g in grads {
        let s = tape.sum_sq(g);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

/// Largest relative disagreement between the tape gradient and central
/// differences: `max_i |analytic_i - numeric_i| / (|analytic_i| + step)`.
pub fn finite_diff_check<F>(loss: F, params: &ParamVector, step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if step.is_nan() || step <= 0.0 {
        return Err(DiffError::InvalidStep(step));
    }
    let analytic = grad(&loss, params)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.values[i];
        probe.values[i] = orig + step;
        let up = value(&loss, &probe)?;
        probe.values[i] = orig - step;
        let down = value(&loss, &probe)?;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.values[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + step));
    }
    Ok(worst)
}
