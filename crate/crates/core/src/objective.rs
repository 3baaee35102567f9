//! The per-client oracle the optimizers talk to.

use crate::error::Result;
use crate::linalg::{self, Matrix};

/// Smooth local objective `f_i` with first and second derivatives.
///
/// Implementations must be pure in `x` so clients can be evaluated in
/// parallel.
pub trait LocalObjective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn hessian(&self, x: &[f64]) -> Result<Matrix>;
}

/// `f(x) = ½ xᵀ A x − bᵀ x`, used for synthetic instances with a known,
/// constant Hessian.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
        linalg::check_dim(a.dim(), b.len())?;
        Ok(Quadratic { a, b })
    }
}

impl LocalObjective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let ax = self.a.matvec(x)?;
        Ok(0.5 * linalg::dot(x, &ax)? - linalg::dot(&self.b, x)?)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.matvec(x)?;
        Ok(linalg::sub(&ax, &self.b))
    }

    fn hessian(&self, x: &[f64]) -> Result<Matrix> {
        linalg::check_dim(self.dim(), x.len())?;
        Ok(self.a.clone())
    }
}

/// Global objective `(1/n) Σ f_i(x)`, evaluated in client order.
pub fn global_loss<O: LocalObjective>(clients: &[O], x: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for c in clients {
        acc += c.loss(x)?;
    }
    Ok(acc / clients.len() as f64)
}

pub fn global_gradient<O: LocalObjective>(clients: &[O], x: &[f64]) -> Result<Vec<f64>> {
    let grads = clients
        .iter()
        .map(|c| c.gradient(x))
        .collect::<Result<Vec<_>>>()?;
    linalg::deterministic_mean(&grads)
}

pub fn global_hessian<O: LocalObjective>(clients: &[O], x: &[f64]) -> Result<Matrix> {
    let hs = clients
        .iter()
        .map(|c| c.hessian(x))
        .collect::<Result<Vec<_>>>()?;
    linalg::deterministic_matrix_mean(&hs)
}
