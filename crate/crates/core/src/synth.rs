//! Seeded generator for LibSVM-format binary classification data shaped like
//! the standard benchmark sets (same sample count and dimension, sparse 0/1
//! features, labels from a planted logistic model).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub name: &'static str,
    pub n_samples: usize,
    pub dim: usize,
    pub n_clients: usize,
    /// Expected number of active features per sample.
    pub mean_active: f64,
    /// Scale of the planted weights.
    pub weight_scale: f64,
}

/// Shapes of the four benchmark sets (N, d, clients).
pub const PROFILES: [Profile; 4] = [
    Profile {
        name: "a1a",
        n_samples: 1600,
        dim: 99,
        n_clients: 10,
        mean_active: 13.0,
        weight_scale: 0.8,
    },
    Profile {
        name: "w7a",
        n_samples: 24640,
        dim: 263,
        n_clients: 80,
        mean_active: 11.0,
        weight_scale: 0.9,
    },
    Profile {
        name: "w8a",
        n_samples: 49700,
        dim: 267,
        n_clients: 60,
        mean_active: 11.0,
        weight_scale: 0.9,
    },
    Profile {
        name: "phishing",
        n_samples: 11040,
        dim: 40,
        n_clients: 40,
        mean_active: 18.0,
        weight_scale: 0.5,
    },
];

pub fn profile(name: &str) -> Result<Profile> {
    PROFILES
        .iter()
        .copied()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown synthetic profile `{name}`")))
}

/// Renders `profile` as LibSVM text. Identical `seed` gives identical text.
pub fn generate(profile: &Profile, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = profile.dim;
    // Skewed per-feature activation rates, normalized to the target density.
    let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>().powi(3) + 0.01).collect();
    let total: f64 = raw.iter().sum();
    let rates: Vec<f64> = raw
        .iter()
        .map(|r| (r / total * profile.mean_active).min(0.95))
        .collect();
    let weights: Vec<f64> = (0..d)
        .map(|_| profile.weight_scale * rng.random_range(-1.0..1.0))
        .collect();
    let bias = -0.5;

    let mut out = String::with_capacity(profile.n_samples * (8 + 5 * profile.mean_active as usize));
    let mut active = Vec::with_capacity(d);
    for _ in 0..profile.n_samples {
        active.clear();
        active.extend((0..d).filter(|&j| rng.random::<f64>() < rates[j]));
        let z: f64 = bias + active.iter().map(|&j| weights[j]).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        let label = if rng.random::<f64>() < p { "+1" } else { "-1" };
        out.push_str(label);
        for &j in &active {
            let _ = write!(out, " {}:1", j + 1);
        }
        out.push('\n');
    }
    out
}
