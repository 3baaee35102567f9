//! Convergence diagnostics for the inner consensus problem.
//!
//! At model `x^k` the inner problem
//! `min (1/n) Σ ½ yᵀ(H_i + αI)y − yᵀ g_i` has the closed-form optimum
//! `y★ = (H̄ + αI)⁻¹ ḡ` and optimal duals `λ_i★ = g_i − (H_i + αI) y★`.
//! The helpers here compare an ADMM state against those optima: primal and
//! dual residuals, the Lyapunov value `V^k`, and the direction error.

use log::warn;

use crate::algorithms::{ClientState, FedNew};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, solve, Matrix};
use crate::objective::LocalObjective;

/// Local Hessians and gradients of one round's inner problem.
#[derive(Debug, Clone)]
pub struct InnerProblem {
    /// `H_i` without the `α` shift.
    pub hessians: Vec<Matrix>,
    pub gradients: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl InnerProblem {
    /// Evaluates fresh Hessians and gradients at `x`.
    pub fn at<O: LocalObjective>(clients: &[O], x: &[f64], alpha: f64) -> Result<Self> {
        let mut hessians = Vec::with_capacity(clients.len());
        let mut gradients = Vec::with_capacity(clients.len());
        for c in clients {
            hessians.push(c.hessian(x)?);
            gradients.push(c.gradient(x)?);
        }
        Self::new(hessians, gradients, alpha)
    }

    /// Uses the Hessians and gradients the clients actually hold.
    pub fn from_clients(clients: &[ClientState], alpha: f64) -> Result<Self> {
        let hessians = clients
            .iter()
            .map(|c| {
                c.hessian
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("client has no Hessian".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let gradients = clients.iter().map(|c| c.gradient.clone()).collect();
        Self::new(hessians, gradients, alpha)
    }

    pub fn new(hessians: Vec<Matrix>, gradients: Vec<Vec<f64>>, alpha: f64) -> Result<Self> {
        if hessians.is_empty() || hessians.len() != gradients.len() {
            return Err(Error::InvalidArgument(
                "inner problem needs one Hessian per gradient".into(),
            ));
        }
        let d = gradients[0].len();
        for (h, g) in hessians.iter().zip(&gradients) {
            linalg::check_dim(d, h.dim())?;
            linalg::check_dim(d, g.len())?;
        }
        Ok(InnerProblem {
            hessians,
            gradients,
            alpha,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.hessians.len()
    }

    /// `H̄ + αI`
    pub fn averaged_system(&self) -> Result<Matrix> {
        let mut h = linalg::deterministic_matrix_mean(&self.hessians)?;
        h.add_diagonal(self.alpha);
        Ok(h)
    }

    pub fn mean_gradient(&self) -> Result<Vec<f64>> {
        linalg::deterministic_mean(&self.gradients)
    }

    /// `y★ = (H̄ + αI)⁻¹ ḡ`
    pub fn y_star(&self) -> Result<Vec<f64>> {
        solve(&cholesky(&self.averaged_system()?)?, &self.mean_gradient()?)
    }

    /// `λ_i★ = g_i − (H_i + αI) y★`
    pub fn lambda_star(&self, y_star: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.hessians
            .iter()
            .zip(&self.gradients)
            .map(|(h, g)| {
                let hy = h.matvec(y_star)?;
                Ok(g.iter()
                    .zip(&hy)
                    .zip(y_star)
                    .map(|((gi, hyi), yi)| gi - hyi - self.alpha * yi)
                    .collect())
            })
            .collect()
    }

    /// `‖(H̄ + αI) y − ḡ‖`
    pub fn residual(&self, y: &[f64]) -> Result<f64> {
        let ay = self.averaged_system()?.matvec(y)?;
        Ok(linalg::distance(&ay, &self.mean_gradient()?))
    }
}

/// Inner optimum at `x`: `(H̄(x) + αI)⁻¹ ḡ(x)`.
pub fn inner_optimum<O: LocalObjective>(clients: &[O], x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    InnerProblem::at(clients, x, alpha)?.y_star()
}

/// Optimal duals at `x` for a given `y★`.
pub fn optimal_duals<O: LocalObjective>(
    clients: &[O],
    x: &[f64],
    y_star: &[f64],
    alpha: f64,
) -> Result<Vec<Vec<f64>>> {
    InnerProblem::at(clients, x, alpha)?.lambda_star(y_star)
}

/// Snapshot of the ADMM variables after a pass.
#[derive(Debug, Clone, Copy)]
pub struct AdmmSnapshot<'a> {
    pub lambdas: &'a [Vec<f64>],
    pub local_directions: &'a [Vec<f64>],
    pub direction: &'a [f64],
    pub prev_direction: &'a [f64],
}

/// `V = (1/ρ) Σ‖λ_i − λ_i★‖² + 2β₁ Σ‖y_i − y★‖² + ρn‖y − y★‖² + 2ρn‖y − y_prev‖²`
pub fn lyapunov(
    snap: &AdmmSnapshot<'_>,
    y_star: &[f64],
    lambda_star: &[Vec<f64>],
    rho: f64,
    beta1: f64,
) -> f64 {
    let n = snap.lambdas.len() as f64;
    let dual: f64 = snap
        .lambdas
        .iter()
        .zip(lambda_star)
        .map(|(l, ls)| linalg::distance(l, ls).powi(2))
        .sum();
    let local: f64 = snap
        .local_directions
        .iter()
        .map(|y| linalg::distance(y, y_star).powi(2))
        .sum();
    let global = linalg::distance(snap.direction, y_star).powi(2);
    let drift = linalg::distance(snap.direction, snap.prev_direction).powi(2);
    dual / rho + 2.0 * beta1 * local + rho * n * global + 2.0 * rho * n * drift
}

/// Empirical Lipschitz constant of `∇Q_i(x, y) = (H_i(x) + αI) y − g_i(x)` in
/// `y`: the largest ratio `‖∇Q_i(p) − ∇Q_i(q)‖ / ‖y_p − y_q‖` over all probe
/// pairs and clients. A lower bound on the true constant.
pub fn estimate_lq<O: LocalObjective>(
    clients: &[O],
    probes: &[(Vec<f64>, Vec<f64>)],
    alpha: f64,
) -> Result<f64> {
    if probes.len() < 2 {
        return Err(Error::InvalidArgument("need at least two probe points".into()));
    }
    let mut best = 0.0f64;
    let mut compared = false;
    for c in clients {
        let grads = probes
            .iter()
            .map(|(x, y)| {
                let mut q = c.hessian(x)?.matvec(y)?;
                let g = c.gradient(x)?;
                for ((qi, gi), yi) in q.iter_mut().zip(&g).zip(y) {
                    *qi += alpha * yi - gi;
                }
                Ok(q)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..probes.len() {
            for j in i + 1..probes.len() {
                let dy = linalg::distance(&probes[i].1, &probes[j].1);
                if dy == 0.0 {
                    continue;
                }
                compared = true;
                best = best.max(linalg::distance(&grads[i], &grads[j]) / dy);
            }
        }
    }
    if !compared {
        return Err(Error::InvalidArgument(
            "all probe pairs share the same y".into(),
        ));
    }
    Ok(best)
}

/// Slack in the step-size condition `β₁ + β₂ ≤ α − 2.5ρ − 8L_q²n/ρ`: the
/// largest admissible `β₂` for the given `β₁`. Positive slack means the
/// condition can be met.
pub fn alpha_condition_slack(alpha: f64, rho: f64, lq: f64, n: usize, beta1: f64) -> f64 {
    alpha - 2.5 * rho - 8.0 * lq * lq * n as f64 / rho - beta1
}

/// Smallest `β₁` accepted by the convergence theorem, `L_q²/ρ`.
pub fn default_beta1(lq: f64, rho: f64) -> f64 {
    lq * lq / rho
}

/// `f − f★`, floored at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap {
    pub value: f64,
    /// `f` fell below `f★` by more than round-off.
    pub clamped: bool,
}

/// Differences below this fraction of `|f★|` are treated as evaluation noise.
pub const GAP_ROUNDOFF: f64 = 1e-13;

pub fn optimality_gap(f: f64, f_star: f64) -> Gap {
    let raw = f - f_star;
    if raw >= 0.0 {
        return Gap {
            value: raw,
            clamped: false,
        };
    }
    let noise = GAP_ROUNDOFF * f_star.abs().max(1.0);
    if -raw <= noise {
        Gap {
            value: 0.0,
            clamped: false,
        }
    } else {
        warn!("f = {f:e} below f* = {f_star:e}; clamping gap to 0");
        Gap {
            value: 0.0,
            clamped: true,
        }
    }
}

/// Everything logged per round when diagnostics are on.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundDiagnostics {
    pub y_star_norm: f64,
    pub direction_error: f64,
    pub direction_error_rel: f64,
    pub dual_residual_norm: f64,
    pub max_primal_residual: f64,
    pub lyapunov: f64,
    pub lq_estimate: f64,
    pub beta1: f64,
    pub alpha_slack: f64,
    pub dual_sum_norm: f64,
    /// `‖y^k − y^{k−1}‖² / ‖y^k − y★‖²`.
    pub step_ratio: f64,
}

impl RoundDiagnostics {
    pub const COLUMNS: [&'static str; 11] = [
        "y_star_norm",
        "direction_error",
        "direction_error_rel",
        "dual_residual_norm",
        "max_primal_residual",
        "lyapunov",
        "lq_estimate",
        "beta1",
        "alpha_slack",
        "dual_sum_norm",
        "step_ratio",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.y_star_norm,
            self.direction_error,
            self.direction_error_rel,
            self.dual_residual_norm,
            self.max_primal_residual,
            self.lyapunov,
            self.lq_estimate,
            self.beta1,
            self.alpha_slack,
            self.dual_sum_norm,
            self.step_ratio,
        ]
    }
}

/// Diagnostics for the round just completed by `alg`, measured against the
/// inner problem built from the Hessians and gradients the clients used.
pub fn fednew_round_diagnostics<O: LocalObjective>(
    alg: &FedNew<'_, O>,
    prev_direction: &[f64],
    lq: f64,
    beta1: f64,
) -> Result<RoundDiagnostics> {
    let p = alg.params();
    let clients = alg.clients();
    let inner = InnerProblem::from_clients(clients, p.alpha)?;
    let y_star = inner.y_star()?;
    let lambda_star = inner.lambda_star(&y_star)?;
    let y = &alg.server().y;
    let lambdas: Vec<Vec<f64>> = clients.iter().map(|c| c.lambda.clone()).collect();
    let locals: Vec<Vec<f64>> = clients.iter().map(|c| c.y.clone()).collect();
    let snap = AdmmSnapshot {
        lambdas: &lambdas,
        local_directions: &locals,
        direction: y,
        prev_direction,
    };
    let direction_error = linalg::distance(y, &y_star);
    let y_star_norm = linalg::norm(&y_star);
    let max_primal_residual = locals
        .iter()
        .map(|yi| linalg::distance(yi, y))
        .fold(0.0, f64::max);
    let drift = linalg::distance(y, prev_direction);
    Ok(RoundDiagnostics {
        y_star_norm,
        direction_error,
        direction_error_rel: direction_error / (y_star_norm + 1e-12),
        dual_residual_norm: p.rho * drift,
        max_primal_residual,
        lyapunov: lyapunov(&snap, &y_star, &lambda_star, p.rho, beta1),
        lq_estimate: lq,
        beta1,
        alpha_slack: alpha_condition_slack(p.alpha, p.rho, lq, clients.len(), beta1),
        dual_sum_norm: linalg::norm(&alg.dual_sum()),
        step_ratio: if direction_error > 0.0 {
            drift * drift / (direction_error * direction_error)
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Quadratic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quadratics(n: usize, d: usize, seed: u64) -> Vec<Quadratic> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = Matrix::from_row_major(d, b).unwrap();
                let mut a = b.transpose().matmul(&b).unwrap();
                a.add_diagonal(0.05);
                let g: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                Quadratic::new(a, g).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_gradient_gives_zero_optimum() {
        let q = vec![Quadratic::new(Matrix::scaled_identity(3, 2.0), vec![0.0; 3]).unwrap()];
        assert_eq!(inner_optimum(&q, &[0.0; 3], 0.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn synthetic_two_identity() {
        // H̄ = 2I, ḡ = e₁: gradient of ½xᵀ(2I)x − bᵀx at 0 is −b, so b = −e₁.
        let q = vec![Quadratic::new(Matrix::scaled_identity(2, 2.0), vec![-1.0, 0.0]).unwrap()];
        let y = inner_optimum(&q, &[0.0; 2], 0.0).unwrap();
        assert!(crate::linalg::distance(&y, &[0.5, 0.0]) <= 1e-15, "{y:?}");
    }

    #[test]
    fn random_optimum_residual() {
        let q = random_quadratics(4, 8, 31);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let inner = InnerProblem::at(&q, &x, 0.2).unwrap();
        let y = inner.y_star().unwrap();
        assert!(inner.residual(&y).unwrap() <= 1e-10);
    }

    #[test]
    fn optimal_duals_cases() {
        let q = random_quadratics(1, 4, 32);
        let x = vec![0.3; 4];
        let ys = inner_optimum(&q, &x, 0.1).unwrap();
        let ls = optimal_duals(&q, &x, &ys, 0.1).unwrap();
        assert!(linalg::norm(&ls[0]) < 1e-12);

        let same = vec![q[0].clone(), q[0].clone(), q[0].clone()];
        let ys = inner_optimum(&same, &x, 0.1).unwrap();
        for l in optimal_duals(&same, &x, &ys, 0.1).unwrap() {
            assert!(linalg::norm(&l) < 1e-12);
        }

        let q = random_quadratics(3, 6, 33);
        let x = vec![-0.2; 6];
        let ys = inner_optimum(&q, &x, 0.0).unwrap();
        let ls = optimal_duals(&q, &x, &ys, 0.0).unwrap();
        let sum = linalg::deterministic_mean(&ls).unwrap();
        assert!(linalg::norm(&sum) * 3.0 <= 1e-9);
    }

    #[test]
    fn lyapunov_terms() {
        let ys = vec![1.0, -1.0];
        let ls = vec![vec![0.5, 0.5]];
        let snap = AdmmSnapshot {
            lambdas: &ls,
            local_directions: std::slice::from_ref(&ys),
            direction: &ys,
            prev_direction: &ys,
        };
        assert_eq!(lyapunov(&snap, &ys, &ls, 2.0, 3.0), 0.0);

        // only the dual term: λ − λ★ = ρ v  ⇒  V = ρ‖v‖²
        let rho = 2.5;
        let v = [0.3, -0.4];
        let lam = vec![vec![0.5 + rho * v[0], 0.5 + rho * v[1]]];
        let snap = AdmmSnapshot {
            lambdas: &lam,
            local_directions: std::slice::from_ref(&ys),
            direction: &ys,
            prev_direction: &ys,
        };
        let got = lyapunov(&snap, &ys, &ls, rho, 1.0);
        assert!((got - rho * 0.25).abs() < 1e-14);
    }

    #[test]
    fn lq_scaled_identity_is_exact() {
        let q = vec![Quadratic::new(Matrix::scaled_identity(3, 4.0), vec![1.0, 2.0, 3.0]).unwrap()];
        let probes = vec![
            (vec![0.0; 3], vec![0.0; 3]),
            (vec![0.0; 3], vec![1.0, -2.0, 0.5]),
        ];
        assert_eq!(estimate_lq(&q, &probes, 0.0).unwrap(), 4.0);
        assert!(estimate_lq(&q, &probes[..1], 0.0).is_err());
        let same_y = vec![probes[0].clone(), (vec![1.0; 3], vec![0.0; 3])];
        assert!(estimate_lq(&q, &same_y, 0.0).is_err());
    }

    #[test]
    fn lq_hand_2x2() {
        // H = [[2,1],[1,3]], α = 1: (H+I)(1,0) = (3,1), ratio √10.
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let q = vec![Quadratic::new(a, vec![0.0, 0.0]).unwrap()];
        let probes = vec![(vec![0.0; 2], vec![0.0; 2]), (vec![0.0; 2], vec![1.0, 0.0])];
        let lq = estimate_lq(&q, &probes, 1.0).unwrap();
        assert!((lq - 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lq_bounded_by_operator_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for seed in 0..5 {
            let q = random_quadratics(3, 5, 100 + seed);
            let x = vec![0.1; 5];
            let probes: Vec<(Vec<f64>, Vec<f64>)> = (0..6)
                .map(|_| (x.clone(), (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let alpha = 0.5;
            let est = estimate_lq(&q, &probes, alpha).unwrap();
            let bound = q
                .iter()
                .map(|c| {
                    let mut h = c.a.clone();
                    h.add_diagonal(alpha);
                    h.symmetric_spectral_norm(10_000, 1e-14)
                })
                .fold(0.0, f64::max);
            assert!(est <= bound * (1.0 + 1e-9), "{est} > {bound}");
        }
    }

    #[test]
    fn gap_clamping() {
        assert_eq!(optimality_gap(1.5, 1.0).value, 0.5);
        assert_eq!(optimality_gap(1.0, 1.0).value, 0.0);
        let tiny = optimality_gap(0.3 - 1e-17, 0.3);
        assert_eq!(tiny, Gap { value: 0.0, clamped: false });
        let real = optimality_gap(0.2, 0.3);
        assert_eq!(real, Gap { value: 0.0, clamped: true });
    }

    #[test]
    fn slack_formula() {
        // α=100, ρ=1, L=1, n=2, β₁=1: 100 − 2.5 − 16 − 1
        assert_eq!(alpha_condition_slack(100.0, 1.0, 1.0, 2, 1.0), 80.5);
        assert_eq!(default_beta1(2.0, 4.0), 1.0);
    }
}
