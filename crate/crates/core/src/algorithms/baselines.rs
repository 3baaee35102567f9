//! First- and second-order baselines: FedGD, Newton Zero, federated exact
//! Newton, and the centralized Newton reference used for `f★`.

use rayon::prelude::*;

use super::{AlgorithmKind, FederatedOptimizer, RoundReport};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, solve, Matrix, SpdFactor};
use crate::objective::{global_gradient, global_hessian, global_loss, LocalObjective};
use crate::protocol::{Bus, Envelope, MessageKind};

fn check_clients<O: LocalObjective>(clients: &[O], dim: usize) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    clients
        .iter()
        .try_for_each(|c| linalg::check_dim(dim, c.dim()))
}

fn gather_gradients<O: LocalObjective>(
    clients: &[O],
    x: &[f64],
    bus: &mut Bus,
    round: usize,
) -> Result<Vec<f64>> {
    let dim = x.len();
    let msgs = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(Envelope {
                client: i,
                kind: MessageKind::DenseVector { dim },
                payload: c.gradient(x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = bus.gather(round, msgs)?;
    linalg::deterministic_mean(&grads)
}

fn gather_hessians<O: LocalObjective>(
    clients: &[O],
    x: &[f64],
    bus: &mut Bus,
    round: usize,
) -> Result<Matrix> {
    let dim = x.len();
    let msgs = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(Envelope {
                client: i,
                kind: MessageKind::DenseMatrix { dim },
                payload: c.hessian(x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hs = bus.gather(round, msgs)?;
    linalg::deterministic_matrix_mean(&hs)
}

/// Distributed gradient descent: `x ← x − step · mean(∇f_i(x))`.
pub struct FedGd<'a, O> {
    clients: &'a [O],
    step: f64,
    x: Vec<f64>,
    k: usize,
}

impl<'a, O: LocalObjective> FedGd<'a, O> {
    pub fn new(clients: &'a [O], step: f64, x0: Vec<f64>) -> Result<Self> {
        check_clients(clients, x0.len())?;
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidArgument(format!("gd step must be > 0, got {step}")));
        }
        Ok(FedGd {
            clients,
            step,
            x: x0,
            k: 0,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }
}

impl<O: LocalObjective> FederatedOptimizer for FedGd<'_, O> {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::FedGd
    }

    fn model(&self) -> &[f64] {
        &self.x
    }

    fn rounds_done(&self) -> usize {
        self.k
    }

    fn round(&mut self, bus: &mut Bus) -> Result<RoundReport> {
        let k = self.k;
        let g = gather_gradients(self.clients, &self.x, bus, k).map_err(|e| e.in_round(k))?;
        let step: Vec<f64> = g.iter().map(|v| self.step * v).collect();
        for (x, s) in self.x.iter_mut().zip(&step) {
            *x -= s;
        }
        bus.broadcast(k, MessageKind::DenseVector { dim: self.x.len() })?;
        self.k += 1;
        Ok(RoundReport {
            round: k,
            step,
            prev_direction: None,
            hessian_refreshed: false,
        })
    }
}

/// Ships full Hessians once at round 0, then reuses the factor of their
/// average with fresh gradients: `x ← x − (H̄⁰)⁻¹ ḡ(x)`.
pub struct NewtonZero<'a, O> {
    clients: &'a [O],
    x: Vec<f64>,
    k: usize,
    factor: Option<SpdFactor>,
}

impl<'a, O: LocalObjective> NewtonZero<'a, O> {
    pub fn new(clients: &'a [O], x0: Vec<f64>) -> Result<Self> {
        check_clients(clients, x0.len())?;
        Ok(NewtonZero {
            clients,
            x: x0,
            k: 0,
            factor: None,
        })
    }

    pub fn factor(&self) -> Option<&SpdFactor> {
        self.factor.as_ref()
    }

    /// `(H̄⁰)⁻¹ ḡ(x)` without touching the bus; needs round 0 done.
    pub fn direction_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self
            .factor
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("Newton Zero has no Hessian yet".into()))?;
        solve(f, &global_gradient(self.clients, x)?)
    }
}

impl<O: LocalObjective> FederatedOptimizer for NewtonZero<'_, O> {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::NewtonZero
    }

    fn model(&self) -> &[f64] {
        &self.x
    }

    fn rounds_done(&self) -> usize {
        self.k
    }

    fn round(&mut self, bus: &mut Bus) -> Result<RoundReport> {
        let k = self.k;
        let step = (|| -> Result<Vec<f64>> {
            let refreshed = self.factor.is_none();
            if refreshed {
                let h = gather_hessians(self.clients, &self.x, bus, k)?;
                self.factor = Some(cholesky(&h)?);
            }
            let g = gather_gradients(self.clients, &self.x, bus, k)?;
            solve(self.factor.as_ref().unwrap(), &g)
        })()
        .map_err(|e| e.in_round(k))?;
        for (x, s) in self.x.iter_mut().zip(&step) {
            *x -= s;
        }
        bus.broadcast(k, MessageKind::DenseVector { dim: self.x.len() })?;
        self.k += 1;
        Ok(RoundReport {
            round: k,
            step,
            prev_direction: None,
            hessian_refreshed: k == 0,
        })
    }
}

/// Federated exact Newton: every round ships Hessians and gradients.
pub struct ExactNewton<'a, O> {
    clients: &'a [O],
    x: Vec<f64>,
    k: usize,
}

impl<'a, O: LocalObjective> ExactNewton<'a, O> {
    pub fn new(clients: &'a [O], x0: Vec<f64>) -> Result<Self> {
        check_clients(clients, x0.len())?;
        Ok(ExactNewton { clients, x: x0, k: 0 })
    }
}

impl<O: LocalObjective> FederatedOptimizer for ExactNewton<'_, O> {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Newton
    }

    fn model(&self) -> &[f64] {
        &self.x
    }

    fn rounds_done(&self) -> usize {
        self.k
    }

    fn round(&mut self, bus: &mut Bus) -> Result<RoundReport> {
        let k = self.k;
        let step = (|| -> Result<Vec<f64>> {
            let h = gather_hessians(self.clients, &self.x, bus, k)?;
            let g = gather_gradients(self.clients, &self.x, bus, k)?;
            solve(&cholesky(&h)?, &g)
        })()
        .map_err(|e| e.in_round(k))?;
        for (x, s) in self.x.iter_mut().zip(&step) {
            *x -= s;
        }
        bus.broadcast(k, MessageKind::DenseVector { dim: self.x.len() })?;
        self.k += 1;
        Ok(RoundReport {
            round: k,
            step,
            prev_direction: None,
            hessian_refreshed: true,
        })
    }
}

/// Iterates of the centralized reference Newton method.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonTrace {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// Objective at `x⁰, x¹, …, x^iters`.
    pub values: Vec<f64>,
    pub grad_norm: f64,
}

/// `iters` full Newton steps on `(1/n) Σ f_i` from `x0`.
pub fn exact_newton<O: LocalObjective>(clients: &[O], x0: Vec<f64>, iters: usize) -> Result<NewtonTrace> {
    check_clients(clients, x0.len())?;
    let mut x = x0;
    let mut values = vec![global_loss(clients, &x)?];
    for k in 0..iters {
        let step = (|| -> Result<Vec<f64>> {
            let h = global_hessian(clients, &x)?;
            let g = global_gradient(clients, &x)?;
            solve(&cholesky(&h)?, &g)
        })()
        .map_err(|e| e.in_round(k))?;
        for (xi, s) in x.iter_mut().zip(&step) {
            *xi -= s;
        }
        values.push(global_loss(clients, &x)?);
    }
    let grad_norm = linalg::norm(&global_gradient(clients, &x)?);
    Ok(NewtonTrace {
        f_star: *values.last().unwrap(),
        x_star: x,
        values,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sigmoid, ClientShard, Sample};
    use crate::linalg::distance;
    use crate::objective::Quadratic;
    use crate::protocol::AccountingRules;

    fn half_norm_sq(d: usize) -> Vec<Quadratic> {
        vec![Quadratic::new(Matrix::identity(d), vec![0.0; d]).unwrap()]
    }

    fn constant_hessian_quadratics() -> Vec<Quadratic> {
        let a1 = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let a2 = Matrix::from_rows(&[vec![1.0, -0.2], vec![-0.2, 3.0]]).unwrap();
        vec![
            Quadratic::new(a1, vec![1.0, -1.0]).unwrap(),
            Quadratic::new(a2, vec![0.5, 2.0]).unwrap(),
        ]
    }

    #[test]
    fn fedgd_zero_gradient_and_unit_quadratic() {
        let q = half_norm_sq(3);
        let mut bus = Bus::new(1, AccountingRules::default());
        let mut gd = FedGd::new(&q, 0.7, vec![0.0; 3]).unwrap();
        gd.round(&mut bus).unwrap();
        assert_eq!(gd.model(), &[0.0; 3]);

        let mut gd = FedGd::new(&q, 1.0, vec![3.0, -1.0, 2.0]).unwrap();
        gd.round(&mut bus).unwrap();
        assert_eq!(gd.model(), &[0.0; 3]);
    }

    #[test]
    fn fedgd_bits() {
        let q = constant_hessian_quadratics();
        let mut bus = Bus::new(2, AccountingRules::default());
        let mut gd = FedGd::new(&q, 0.1, vec![0.0; 2]).unwrap();
        for k in 1..=3u64 {
            gd.round(&mut bus).unwrap();
            assert_eq!(bus.ledger().up_bits(0), k * 64);
            assert_eq!(bus.ledger().down_bits(0), k * 64);
        }
    }

    #[test]
    fn fedgd_matches_scalar_logistic_reference() {
        let samples = vec![
            Sample { label: 1.0, features: vec![(1, 0.8)] },
            Sample { label: -1.0, features: vec![(1, 1.5)] },
            Sample { label: 1.0, features: vec![(1, -0.3)] },
        ];
        let mu = 0.05;
        let shard = ClientShard { client_id: 0, samples: samples.clone(), dim: 1, mu };
        let clients = [shard];
        let step = 0.9;
        let mut gd = FedGd::new(&clients, step, vec![0.2]).unwrap();
        let mut bus = Bus::new(1, AccountingRules::default());
        let mut x = 0.2f64;
        for _ in 0..10 {
            gd.round(&mut bus).unwrap();
            let mut g = 0.0;
            for s in &samples {
                let a = s.features[0].1;
                g += -s.label * a * sigmoid(-s.label * a * x);
            }
            g = g / 3.0 + mu * x;
            x -= step * g;
            assert!((gd.model()[0] - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn newton_zero_quadratic_one_step_and_bits() {
        let q = constant_hessian_quadratics();
        let mut bus = Bus::new(2, AccountingRules::default());
        let mut nz = NewtonZero::new(&q, vec![5.0, -4.0]).unwrap();
        nz.round(&mut bus).unwrap();
        assert_eq!(bus.ledger().up_bits(0), 32 * 4 + 32 * 2);
        let g = global_gradient(&q, nz.model()).unwrap();
        assert!(linalg::norm(&g) < 1e-12);
        let x1 = nz.model().to_vec();
        nz.round(&mut bus).unwrap();
        assert_eq!(bus.ledger().up_bits(0), 32 * 4 + 32 * 2 + 32 * 2);
        assert!(distance(nz.model(), &x1) < 1e-14);
    }

    #[test]
    fn exact_newton_quadratic() {
        let q = constant_hessian_quadratics();
        let tr = exact_newton(&q, vec![1.0, 1.0], 5).unwrap();
        assert!(tr.grad_norm < 1e-12);
        assert!((tr.values[1] - tr.values[5]).abs() < 1e-15);
        assert_eq!(tr.values.len(), 6);
    }
}
