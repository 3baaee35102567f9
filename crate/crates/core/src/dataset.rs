//! LibSVM reading, even client sharding and the regularized logistic
//! regression oracle.
//!
//! Every client objective carries the full `μ/2 ‖x‖²` term so that the
//! average of the local objectives is the global regularized loss and every
//! local Hessian is positive definite.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, ParseError, Result};
use crate::linalg::{check_dim, Matrix};
use crate::objective::LocalObjective;

/// One labeled example with a sparse feature vector (1-based indices).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: f64,
    pub features: Vec<(u32, f64)>,
}

impl Sample {
    /// `aᵀx`; `x` is 0-based.
    #[inline]
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.features
            .iter()
            .map(|&(j, v)| v * x[j as usize - 1])
            .sum()
    }

    pub fn max_index(&self) -> u32 {
        self.features.last().map_or(0, |&(j, _)| j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// SHA-256 over the dimension, labels and exact feature bits.
    pub fn content_hash(&self) -> String {
        hash_samples(self.dim, &self.samples)
    }
}

fn hash_samples(dim: usize, samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    h.update((dim as u64).to_le_bytes());
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        h.update(s.label.to_bits().to_le_bytes());
        h.update((s.features.len() as u64).to_le_bytes());
        for &(j, v) in &s.features {
            h.update(j.to_le_bytes());
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Pins the feature dimension instead of using the largest index seen.
    pub dim_override: Option<usize>,
}

/// Parses one line; `None` for blank lines.
fn parse_line(line: &str, lineno: usize) -> std::result::Result<Option<Sample>, ParseError> {
    let mut tokens = line.split_ascii_whitespace();
    let Some(label_tok) = tokens.next() else {
        return Ok(None);
    };
    let raw: f64 = label_tok.parse().map_err(|_| ParseError::BadLabel {
        line: lineno,
        token: label_tok.to_string(),
    })?;
    if !raw.is_finite() {
        return Err(ParseError::BadLabel {
            line: lineno,
            token: label_tok.to_string(),
        });
    }
    let label = if raw > 0.0 { 1.0 } else { -1.0 };

    let mut features: Vec<(u32, f64)> = Vec::new();
    for tok in tokens {
        let malformed = || ParseError::MalformedToken {
            line: lineno,
            token: tok.to_string(),
        };
        let (idx, val) = tok.split_once(':').ok_or_else(malformed)?;
        let idx: u32 = idx.parse().map_err(|_| malformed())?;
        let val: f64 = val.parse().map_err(|_| malformed())?;
        if idx == 0 {
            return Err(ParseError::ZeroIndex { line: lineno });
        }
        if !val.is_finite() {
            return Err(ParseError::NonFinite { line: lineno });
        }
        if let Some(&(prev, _)) = features.last() {
            if idx <= prev {
                return Err(ParseError::NonIncreasing {
                    line: lineno,
                    prev,
                    next: idx,
                });
            }
        }
        features.push((idx, val));
    }
    Ok(Some(Sample { label, features }))
}

/// Reads LibSVM text (`label idx:val idx:val ...`, 1-based indices).
///
/// Labels greater than zero map to `+1`, everything else to `-1`. Blank lines
/// are skipped. Errors carry the 1-based line number.
pub fn parse_libsvm<R: BufRead>(
    reader: R,
    opts: ParseOptions,
) -> std::result::Result<Dataset, ParseError> {
    let mut samples = Vec::new();
    let mut max_index = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ParseError::Io(e.to_string()))?;
        if let Some(s) = parse_line(&line, i + 1)? {
            max_index = max_index.max(s.max_index() as usize);
            samples.push(s);
        }
    }
    if samples.is_empty() {
        return Err(ParseError::Empty);
    }
    let dim = match opts.dim_override {
        Some(d) if d < max_index => {
            return Err(ParseError::DimTooSmall { dim: d, max_index })
        }
        Some(d) => d,
        None => max_index,
    };
    Ok(Dataset { samples, dim })
}

pub fn parse_libsvm_str(text: &str, opts: ParseOptions) -> std::result::Result<Dataset, ParseError> {
    parse_libsvm(text.as_bytes(), opts)
}

/// Writes samples back in LibSVM form. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn to_libsvm(dataset: &Dataset) -> String {
    let mut out = String::new();
    for s in &dataset.samples {
        out.push_str(if s.label > 0.0 { "+1" } else { "-1" });
        for &(j, v) in &s.features {
            let _ = write!(out, " {j}:{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ShardOptions {
    pub n_clients: usize,
    pub mu: f64,
    /// Drop trailing samples so that `n_clients` divides the sample count.
    pub truncate_to_multiple: bool,
    /// Shuffle (before truncation) with this seed; `None` keeps file order.
    pub shuffle_seed: Option<u64>,
}

/// A client's contiguous block of samples plus the regularization weight.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub dim: usize,
    pub mu: f64,
}

/// Splits evenly: shard `i` gets samples `[i·m, (i+1)·m)`.
pub fn shard(dataset: &Dataset, opts: &ShardOptions) -> Result<Vec<ClientShard>> {
    let n = opts.n_clients;
    if n == 0 {
        return Err(Error::InvalidArgument("n_clients must be >= 1".into()));
    }
    if !(opts.mu >= 0.0) || !opts.mu.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mu must be finite and nonnegative, got {}",
            opts.mu
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = opts.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let total = dataset.len();
    if !total.is_multiple_of(n) && !opts.truncate_to_multiple {
        return Err(Error::UnevenSplit {
            n_samples: total,
            n_clients: n,
        });
    }
    let m = total / n;
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} clients but only {total} samples"
        )));
    }
    Ok((0..n)
        .map(|i| ClientShard {
            client_id: i,
            samples: order[i * m..(i + 1) * m]
                .iter()
                .map(|&k| dataset.samples[k].clone())
                .collect(),
            dim: dataset.dim,
            mu: opts.mu,
        })
        .collect())
}

/// Hash of the exact data behind a split (after shuffle/truncation).
pub fn shards_hash(shards: &[ClientShard]) -> String {
    let dim = shards.first().map_or(0, |s| s.dim);
    let all: Vec<Sample> = shards.iter().flat_map(|s| s.samples.clone()).collect();
    hash_samples(dim, &all)
}

/// `log(1 + exp(-z))` without overflow.
#[inline]
pub fn log1p_exp_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + exp(-z))`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model vector".into()));
        }
        Ok(())
    }

    fn reg_value(&self, x: &[f64]) -> f64 {
        0.5 * self.mu * x.iter().map(|v| v * v).sum::<f64>()
    }
}

impl LocalObjective for ClientShard {
    fn dim(&self) -> usize {
        self.dim
    }

    /// `(1/m) Σ log(1 + exp(-b aᵀx)) + μ/2 ‖x‖²`
    fn loss(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        let m = self.samples.len() as f64;
        let data: f64 = self
            .samples
            .iter()
            .map(|s| log1p_exp_neg(s.label * s.dot(x)))
            .sum();
        Ok(data / m + self.reg_value(x))
    }

    /// `-(1/m) Σ σ(-b aᵀx) b a + μx`
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let m = self.samples.len() as f64;
        let mut g = vec![0.0; self.dim];
        for s in &self.samples {
            let z = s.label * s.dot(x);
            let w = -sigmoid(-z) * s.label / m;
            for &(j, v) in &s.features {
                g[j as usize - 1] += w * v;
            }
        }
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += self.mu * xi;
        }
        Ok(g)
    }

    /// `(1/m) Σ σ(z)(1-σ(z)) a aᵀ + μI`, `z = b aᵀx`
    fn hessian(&self, x: &[f64]) -> Result<Matrix> {
        self.check_x(x)?;
        let m = self.samples.len() as f64;
        let mut h = Matrix::zeros(self.dim);
        for s in &self.samples {
            let z = s.label * s.dot(x);
            let w = sigmoid(z) * sigmoid(-z) / m;
            for (p, &(jp, vp)) in s.features.iter().enumerate() {
                let wp = w * vp;
                for &(jq, vq) in &s.features[p..] {
                    h.add_at(jp as usize - 1, jq as usize - 1, wp * vq);
                }
            }
        }
        h.mirror_upper();
        h.add_diagonal(self.mu);
        Ok(h)
    }
}
