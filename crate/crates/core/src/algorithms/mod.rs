//! Optimizers expressed as per-round client and server steps over the
//! [`Bus`](crate::protocol::Bus).

mod baselines;
mod fednew;

pub use baselines::{exact_newton, ExactNewton, FedGd, NewtonTrace, NewtonZero};
pub use fednew::{
    fednew_client_step, fednew_dual_step, fednew_server_step, ClientState, FedNew, FedNewParams,
    QuantParams, ServerState,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::LocalObjective;
use crate::protocol::Bus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    FedNew,
    QFedNew,
    FedGd,
    NewtonZero,
    Newton,
}

impl AlgorithmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::FedNew => "fednew",
            AlgorithmKind::QFedNew => "qfednew",
            AlgorithmKind::FedGd => "fedgd",
            AlgorithmKind::NewtonZero => "newton_zero",
            AlgorithmKind::Newton => "newton",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fednew" => AlgorithmKind::FedNew,
            "qfednew" => AlgorithmKind::QFedNew,
            "fedgd" => AlgorithmKind::FedGd,
            "newton_zero" => AlgorithmKind::NewtonZero,
            "newton" => AlgorithmKind::Newton,
            other => return Err(Error::Config(format!("unknown algorithm `{other}`"))),
        })
    }
}

/// Hyperparameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoConfig {
    pub kind: AlgorithmKind,
    pub alpha: f64,
    pub rho: f64,
    /// Hessian refresh rate `r ∈ [0, 1]`.
    pub hessian_rate: f64,
    /// FedGD step; `None` selects `1/L` from the clients' Hessians at `x⁰`.
    pub gd_step: Option<f64>,
    pub bits: u8,
    pub range_bits: u32,
    /// ADMM passes per outer round. 1 is the one-pass algorithm; larger values
    /// are a testing aid.
    pub inner_passes: usize,
    pub max_rounds: usize,
    pub seed: u64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            kind: AlgorithmKind::FedNew,
            alpha: 0.0,
            rho: 1.0,
            hessian_rate: 1.0,
            gd_step: None,
            bits: 3,
            range_bits: crate::quantizer::DEFAULT_RANGE_BITS,
            inner_passes: 1,
            max_rounds: 50,
            seed: 0,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if matches!(self.kind, AlgorithmKind::FedNew | AlgorithmKind::QFedNew) {
            if !(self.rho > 0.0) || !self.rho.is_finite() {
                return fail(format!("rho must be finite and > 0, got {}", self.rho));
            }
            if !(0.0..=1.0).contains(&self.hessian_rate) {
                return fail(format!("r must lie in [0, 1], got {}", self.hessian_rate));
            }
            if self.inner_passes == 0 {
                return fail("inner_passes must be >= 1".into());
            }
        }
        if let Some(step) = self.gd_step {
            if !(step > 0.0) || !step.is_finite() {
                return fail(format!("gd_step must be finite and > 0, got {step}"));
            }
        }
        if self.kind == AlgorithmKind::QFedNew {
            if self.bits == 0 || self.bits > crate::quantizer::MAX_BITS {
                return fail(format!("bits must be in 1..=32, got {}", self.bits));
            }
            if self.range_bits > 32 {
                return fail(format!("range bits must be <= 32, got {}", self.range_bits));
            }
        }
        Ok(())
    }
}

/// Whether client Hessians are re-evaluated at round `k` for refresh rate `r`:
/// always at `k = 0`, then every `round(1/r)` rounds; never again when `r = 0`.
pub fn hessian_refresh_due(rate: f64, k: usize) -> bool {
    if k == 0 {
        return true;
    }
    if rate <= 0.0 {
        return false;
    }
    let period = (1.0 / rate).round().max(1.0) as usize;
    k.is_multiple_of(period)
}

/// What one outer round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Step actually applied: `x^{k+1} = x^k − step`.
    pub step: Vec<f64>,
    /// Global direction before the round (`y^{k−1}`), FedNew only.
    pub prev_direction: Option<Vec<f64>>,
    pub hessian_refreshed: bool,
}

/// Uniform driver interface over all optimizers.
pub trait FederatedOptimizer {
    fn kind(&self) -> AlgorithmKind;
    fn model(&self) -> &[f64];
    fn rounds_done(&self) -> usize;
    fn round(&mut self, bus: &mut Bus) -> Result<RoundReport>;
}

/// `max_i ‖H_i(x)‖₂`, the smoothness bound used for the default FedGD step.
pub fn max_local_smoothness<O: LocalObjective>(clients: &[O], x: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in clients {
        let h: Matrix = c.hessian(x)?;
        worst = worst.max(h.symmetric_spectral_norm(1000, 1e-10));
    }
    Ok(worst)
}

/// Builds the optimizer an [`AlgoConfig`] names, starting from `x0`.
pub fn build<'a, O: LocalObjective>(
    cfg: &AlgoConfig,
    clients: &'a [O],
    x0: Vec<f64>,
) -> Result<Box<dyn FederatedOptimizer + 'a>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        AlgorithmKind::FedNew | AlgorithmKind::QFedNew => {
            let quant = (cfg.kind == AlgorithmKind::QFedNew).then_some(QuantParams {
                bits: cfg.bits,
                range_bits: cfg.range_bits,
                seed: cfg.seed,
            });
            Box::new(FedNew::new(
                clients,
                FedNewParams {
                    alpha: cfg.alpha,
                    rho: cfg.rho,
                    hessian_rate: cfg.hessian_rate,
                    inner_passes: cfg.inner_passes,
                    quant,
                },
                x0,
            )?)
        }
        AlgorithmKind::FedGd => {
            let step = match cfg.gd_step {
                Some(s) => s,
                None => 1.0 / max_local_smoothness(clients, &x0)?,
            };
            Box::new(FedGd::new(clients, step, x0)?)
        }
        AlgorithmKind::NewtonZero => Box::new(NewtonZero::new(clients, x0)?),
        AlgorithmKind::Newton => Box::new(ExactNewton::new(clients, x0)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refresh_schedule() {
        let due = |r: f64| -> Vec<usize> { (0..25).filter(|&k| hessian_refresh_due(r, k)).collect() };
        assert_eq!(due(0.0), vec![0]);
        assert_eq!(due(0.1), vec![0, 10, 20]);
        assert_eq!(due(1.0), (0..25).collect::<Vec<_>>());
        assert_eq!(due(0.5), (0..25).step_by(2).collect::<Vec<_>>());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            AlgorithmKind::FedNew,
            AlgorithmKind::QFedNew,
            AlgorithmKind::FedGd,
            AlgorithmKind::NewtonZero,
            AlgorithmKind::Newton,
        ] {
            assert_eq!(k.as_str().parse::<AlgorithmKind>().unwrap(), k);
        }
        assert!("sgd".parse::<AlgorithmKind>().is_err());
    }

    #[test]
    fn validation() {
        let ok = AlgoConfig::default();
        assert!(ok.validate().is_ok());
        assert!(AlgoConfig { rho: 0.0, ..ok.clone() }.validate().is_err());
        assert!(AlgoConfig { alpha: -1.0, ..ok.clone() }.validate().is_err());
        assert!(AlgoConfig { hessian_rate: 1.5, ..ok.clone() }.validate().is_err());
        assert!(AlgoConfig { inner_passes: 0, ..ok.clone() }.validate().is_err());
        assert!(AlgoConfig {
            kind: AlgorithmKind::QFedNew,
            bits: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(AlgoConfig {
            kind: AlgorithmKind::FedGd,
            gd_step: Some(-1.0),
            ..ok
        }
        .validate()
        .is_err());
    }
}
