//! FedNew and Q-FedNew: one ADMM pass on the consensus form of the Newton
//! subproblem per round, followed by `x ← x − y`.

use rayon::prelude::*;

use super::{hessian_refresh_due, AlgorithmKind, FederatedOptimizer, RoundReport};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, solve, Matrix, SpdFactor};
use crate::objective::LocalObjective;
use crate::protocol::{Bus, Envelope, MessageKind};
use crate::quantizer::{QuantMsg, QuantReceiver, QuantState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub range_bits: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedNewParams {
    pub alpha: f64,
    pub rho: f64,
    pub hessian_rate: f64,
    pub inner_passes: usize,
    /// `Some` switches the upstream channel to the stochastic quantizer.
    pub quant: Option<QuantParams>,
}

/// Per-client ADMM variables and the cached local system.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    /// Local direction `y_i`.
    pub y: Vec<f64>,
    /// Dual `λ_i`.
    pub lambda: Vec<f64>,
    /// Local gradient at the current model.
    pub gradient: Vec<f64>,
    /// Hessian the cached factor was built from (without the `α+ρ` shift).
    pub hessian: Option<Matrix>,
    /// Factor of `H_i + (α+ρ) I`.
    pub factor: Option<SpdFactor>,
    pub hessian_round: Option<usize>,
    pub quant: Option<QuantState>,
}

impl ClientState {
    pub fn new(client_id: usize, dim: usize) -> Self {
        ClientState {
            client_id,
            y: vec![0.0; dim],
            lambda: vec![0.0; dim],
            gradient: vec![0.0; dim],
            hessian: None,
            factor: None,
            hessian_round: None,
            quant: None,
        }
    }

    /// Installs `H` as the local Hessian and factors `H + (α+ρ)I`.
    pub fn set_hessian(&mut self, hessian: Matrix, alpha: f64, rho: f64, round: usize) -> Result<()> {
        let mut shifted = hessian.clone();
        shifted.add_diagonal(alpha + rho);
        self.factor = Some(cholesky(&shifted)?);
        self.hessian = Some(hessian);
        self.hessian_round = Some(round);
        Ok(())
    }

    /// `y_i = (H_i + αI + ρI)⁻¹ (g_i − λ_i + ρ y_prev)` with the cached
    /// factor and gradient.
    fn local_solve(&mut self, y_prev: &[f64], rho: f64) -> Result<Vec<f64>> {
        let factor = self
            .factor
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("client has no Hessian factor".into()))?;
        let rhs: Vec<f64> = self
            .gradient
            .iter()
            .zip(&self.lambda)
            .zip(y_prev)
            .map(|((g, l), yp)| g - l + rho * yp)
            .collect();
        let y = solve(factor, &rhs)?;
        self.y.clone_from(&y);
        Ok(y)
    }
}

/// Global model, global direction and round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub k: usize,
}

impl ServerState {
    pub fn new(x0: Vec<f64>) -> Self {
        let d = x0.len();
        ServerState {
            x: x0,
            y: vec![0.0; d],
            k: 0,
        }
    }

    /// `y = mean(directions)` in client order.
    pub fn aggregate<V: AsRef<[f64]>>(&mut self, directions: &[V], n_clients: usize) -> Result<()> {
        if directions.len() != n_clients {
            return Err(Error::InvalidArgument(format!(
                "expected {n_clients} directions, got {}",
                directions.len()
            )));
        }
        self.y = linalg::deterministic_mean(directions)?;
        Ok(())
    }

    /// `x ← x − y`, `k ← k + 1`.
    pub fn outer_step(&mut self) {
        for (x, y) in self.x.iter_mut().zip(&self.y) {
            *x -= y;
        }
        self.k += 1;
    }
}

/// One local primal update at model `x`: refreshes the gradient (always) and
/// the Hessian factor (when `refresh`), then solves the local system.
#[allow(clippy::too_many_arguments)]
pub fn fednew_client_step<O: LocalObjective + ?Sized>(
    state: &mut ClientState,
    objective: &O,
    x: &[f64],
    y_prev: &[f64],
    refresh: bool,
    round: usize,
    alpha: f64,
    rho: f64,
) -> Result<Vec<f64>> {
    state.gradient = objective.gradient(x)?;
    if refresh || state.factor.is_none() {
        let h = objective.hessian(x)?;
        state.set_hessian(h, alpha, rho, round)?;
    }
    state.local_solve(y_prev, rho)
}

/// Averages the received directions and takes the outer step.
pub fn fednew_server_step<V: AsRef<[f64]>>(
    server: &mut ServerState,
    directions: &[V],
    n_clients: usize,
) -> Result<()> {
    server.aggregate(directions, n_clients)?;
    server.outer_step();
    Ok(())
}

/// `λ_i ← λ_i + ρ (y_i − y)`, using the client's own `y_i`.
pub fn fednew_dual_step(state: &mut ClientState, y_global: &[f64], rho: f64) {
    for ((l, yi), y) in state.lambda.iter_mut().zip(&state.y).zip(y_global) {
        *l += rho * (yi - y);
    }
}

enum Upstream {
    Dense(Vec<f64>),
    Quantized(QuantMsg),
}

/// FedNew / Q-FedNew driver.
pub struct FedNew<'a, O> {
    objectives: &'a [O],
    params: FedNewParams,
    clients: Vec<ClientState>,
    receivers: Vec<QuantReceiver>,
    server: ServerState,
    /// Directions the server actually averaged in the last pass.
    received: Vec<Vec<f64>>,
}

impl<'a, O: LocalObjective> FedNew<'a, O> {
    /// Zero initialization for `y`, `y_i`, `λ_i`.
    pub fn new(objectives: &'a [O], params: FedNewParams, x0: Vec<f64>) -> Result<Self> {
        let n = objectives.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        let d = x0.len();
        for o in objectives {
            linalg::check_dim(d, o.dim())?;
        }
        if !(params.rho > 0.0) {
            return Err(Error::InvalidArgument("rho must be > 0".into()));
        }
        let mut clients: Vec<ClientState> = (0..n).map(|i| ClientState::new(i, d)).collect();
        if let Some(q) = params.quant {
            for c in &mut clients {
                c.quant = Some(QuantState::new(d, q.bits, q.seed, c.client_id as u64)?);
            }
        }
        Ok(FedNew {
            objectives,
            params,
            clients,
            receivers: (0..n).map(|_| QuantReceiver::new(d)).collect(),
            server: ServerState::new(x0),
            received: Vec::new(),
        })
    }

    pub fn params(&self) -> &FedNewParams {
        &self.params
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Mutable access for seeding experiments; callers own consistency.
    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut ServerState {
        &mut self.server
    }

    /// Reconstructed (or exact, when dense) directions of the last pass.
    pub fn received(&self) -> &[Vec<f64>] {
        &self.received
    }

    fn upstream_kind(&self) -> MessageKind {
        let dim = self.server.x.len();
        match self.params.quant {
            Some(q) => MessageKind::QuantizedVector {
                dim,
                bits: q.bits,
                range_bits: q.range_bits,
            },
            None => MessageKind::DenseVector { dim },
        }
    }

    /// Makes sure every client holds a factor and a gradient at the current
    /// model, refreshing the Hessian when `refresh`.
    pub fn prepare_round(&mut self, refresh: bool) -> Result<()> {
        let x = &self.server.x;
        let (alpha, rho, k) = (self.params.alpha, self.params.rho, self.server.k);
        self.clients
            .par_iter_mut()
            .zip(self.objectives.par_iter())
            .try_for_each(|(c, o)| -> Result<()> {
                c.gradient = o.gradient(x)?;
                if refresh || c.factor.is_none() {
                    c.set_hessian(o.hessian(x)?, alpha, rho, k)?;
                }
                Ok(())
            })
    }

    /// One primal/aggregate/dual cycle at the frozen model: client solves,
    /// upstream gather, server average, downstream broadcast, dual updates.
    /// `closing` marks the pass whose broadcast carries the new model.
    pub fn admm_pass(&mut self, bus: &mut Bus, closing: bool) -> Result<()> {
        let round = self.server.k;
        let rho = self.params.rho;
        let y_prev = self.server.y.clone();
        let kind = self.upstream_kind();

        let msgs = self
            .clients
            .par_iter_mut()
            .map(|c| -> Result<Envelope<Upstream>> {
                let y = c.local_solve(&y_prev, rho)?;
                let payload = match &mut c.quant {
                    Some(q) => Upstream::Quantized(q.encode(&y)?),
                    None => Upstream::Dense(y),
                };
                Ok(Envelope {
                    client: c.client_id,
                    kind,
                    payload,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let payloads = bus.gather(round, msgs)?;
        let mut received = Vec::with_capacity(payloads.len());
        for (rx, p) in self.receivers.iter_mut().zip(payloads) {
            received.push(match p {
                Upstream::Dense(y) => y,
                Upstream::Quantized(m) => rx.receive(&m)?.to_vec(),
            });
        }
        self.server.aggregate(&received, self.clients.len())?;
        self.received = received;

        let dim = self.server.x.len();
        let down = if closing {
            MessageKind::ModelAndDirection { dim }
        } else {
            MessageKind::DenseVector { dim }
        };
        bus.broadcast(round, down)?;

        let y = &self.server.y;
        self.clients
            .iter_mut()
            .for_each(|c| fednew_dual_step(c, y, rho));
        Ok(())
    }

    /// Sum of the duals, `Σ λ_i`.
    pub fn dual_sum(&self) -> Vec<f64> {
        let d = self.server.x.len();
        let mut s = vec![0.0; d];
        for c in &self.clients {
            linalg::axpy(1.0, &c.lambda, &mut s);
        }
        s
    }
}

impl<O: LocalObjective> FederatedOptimizer for FedNew<'_, O> {
    fn kind(&self) -> AlgorithmKind {
        if self.params.quant.is_some() {
            AlgorithmKind::QFedNew
        } else {
            AlgorithmKind::FedNew
        }
    }

    fn model(&self) -> &[f64] {
        &self.server.x
    }

    fn rounds_done(&self) -> usize {
        self.server.k
    }

    fn round(&mut self, bus: &mut Bus) -> Result<RoundReport> {
        let k = self.server.k;
        let refresh = hessian_refresh_due(self.params.hessian_rate, k);
        let prev_direction = self.server.y.clone();
        let passes = self.params.inner_passes.max(1);
        let mut run = |this: &mut Self| -> Result<()> {
            this.prepare_round(refresh)?;
            for p in 0..passes {
                this.admm_pass(bus, p + 1 == passes)?;
            }
            Ok(())
        };
        run(self).map_err(|e| e.in_round(k))?;
        let step = self.server.y.clone();
        self.server.outer_step();
        Ok(RoundReport {
            round: k,
            step,
            prev_direction: Some(prev_direction),
            hessian_refreshed: refresh,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{distance, norm};
    use crate::objective::Quadratic;
    use crate::protocol::AccountingRules;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quadratics(n: usize, d: usize, seed: u64) -> Vec<Quadratic> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = Matrix::from_row_major(d, b).unwrap();
                let mut a = b.transpose().matmul(&b).unwrap();
                a.add_diagonal(0.1);
                let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Quadratic::new(a, g).unwrap()
            })
            .collect()
    }

    #[test]
    fn client_step_synthetic_identity() {
        // H = I, α = 0, ρ = 1, g = e₁, λ = 0, y_prev = 0  ⇒  y_i = e₁/2.
        // Quadratic with A = I, b = -e₁ has gradient x + e₁ = e₁ at x = 0.
        let q = Quadratic::new(Matrix::identity(3), vec![-1.0, 0.0, 0.0]).unwrap();
        let mut st = ClientState::new(0, 3);
        let y = fednew_client_step(&mut st, &q, &[0.0; 3], &[0.0; 3], true, 0, 0.0, 1.0).unwrap();
        assert!(crate::linalg::distance(&y, &[0.5, 0.0, 0.0]) <= 1e-15, "{y:?}");
        assert_eq!(st.hessian_round, Some(0));
    }

    #[test]
    fn client_step_matches_straight_line_formula() {
        let qs = random_quadratics(3, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (alpha, rho) = (0.3, 2.0);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y_prev: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        for q in &qs {
            let mut st = ClientState::new(0, 5);
            st.lambda = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lambda = st.lambda.clone();
            let y = fednew_client_step(&mut st, q, &x, &y_prev, true, 0, alpha, rho).unwrap();

            // Independent route: Gaussian elimination with partial pivoting.
            let g = q.gradient(&x).unwrap();
            let mut a: Vec<Vec<f64>> = (0..5)
                .map(|i| {
                    let mut row: Vec<f64> = q.a.row(i).to_vec();
                    row[i] += alpha + rho;
                    row.push(g[i] - lambda[i] + rho * y_prev[i]);
                    row
                })
                .collect();
            for col in 0..5 {
                let piv = (col..5)
                    .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                    .unwrap();
                a.swap(col, piv);
                let pivot_row = a[col].clone();
                for row in a.iter_mut().skip(col + 1) {
                    let f = row[col] / pivot_row[col];
                    for c in col..6 {
                        row[c] -= f * pivot_row[c];
                    }
                }
            }
            let mut want = [0.0; 5];
            for i in (0..5).rev() {
                let s: f64 = (i + 1..5).map(|j| a[i][j] * want[j]).sum();
                want[i] = (a[i][5] - s) / a[i][i];
            }
            assert!(distance(&y, &want) <= 1e-12 * norm(&want).max(1.0));
        }
    }

    #[test]
    fn server_step_cases() {
        let mut s = ServerState::new(vec![1.0, 2.0]);
        fednew_server_step(&mut s, &[vec![0.5, -0.5]], 1).unwrap();
        assert_eq!(s.y, vec![0.5, -0.5]);
        assert_eq!(s.x, vec![0.5, 2.5]);
        assert_eq!(s.k, 1);

        let mut s = ServerState::new(vec![1.0, 2.0]);
        fednew_server_step(&mut s, &[vec![0.5, -0.5], vec![-0.5, 0.5]], 2).unwrap();
        assert_eq!(s.x, vec![1.0, 2.0]);
        assert!(fednew_server_step(&mut s, &[vec![0.5, -0.5]], 2).is_err());
    }

    #[test]
    fn dual_step_cases() {
        let mut st = ClientState::new(0, 3);
        st.y = vec![1.0, 2.0, 3.0];
        st.lambda = vec![0.1, 0.2, 0.3];
        fednew_dual_step(&mut st, &[1.0, 2.0, 3.0], 10.0);
        assert_eq!(st.lambda, vec![0.1, 0.2, 0.3]);

        let mut st = ClientState::new(0, 3);
        st.y = vec![0.0, 1.0, 0.0];
        fednew_dual_step(&mut st, &[0.0, 0.0, 0.0], 10.0);
        assert_eq!(st.lambda, vec![0.0, 10.0, 0.0]);
    }

    #[test]
    fn duals_sum_to_zero_every_round() {
        let qs = random_quadratics(4, 6, 21);
        let params = FedNewParams {
            alpha: 0.1,
            rho: 1.5,
            hessian_rate: 1.0,
            inner_passes: 1,
            quant: None,
        };
        let mut alg = FedNew::new(&qs, params, vec![0.0; 6]).unwrap();
        let mut bus = Bus::new(4, AccountingRules::default());
        for _ in 0..30 {
            alg.round(&mut bus).unwrap();
            assert!(norm(&alg.dual_sum()) <= 1e-10);
        }
    }

    #[test]
    fn dense_round_bits() {
        let qs = random_quadratics(3, 4, 22);
        let params = FedNewParams {
            alpha: 0.0,
            rho: 1.0,
            hessian_rate: 0.0,
            inner_passes: 1,
            quant: None,
        };
        let mut alg = FedNew::new(&qs, params, vec![0.0; 4]).unwrap();
        let mut bus = Bus::new(3, AccountingRules::default());
        for k in 1..=5u64 {
            alg.round(&mut bus).unwrap();
            assert_eq!(bus.ledger().up_bits(1), k * 32 * 4);
            assert_eq!(bus.ledger().down_bits(1), k * 64 * 4);
        }
    }
}
