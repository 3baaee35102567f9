//! Differentially encoded stochastic quantization of direction vectors.
//!
//! Each element of `y - ŷ_prev` is shifted by the range `R` into
//! `[0, 2^b - 1]` in units of `Δ = 2R / (2^b - 1)` and rounded up with
//! probability equal to its fractional part, so the reconstruction is
//! unbiased. Sender and receiver both advance `ŷ_prev` to the decoded value.
//!
//! `R` is chosen per message as the largest absolute difference, rounded up
//! to the next `f32` because it travels as a 32-bit float.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest supported resolution; levels are stored as `u32`.
pub const MAX_BITS: u8 = 32;

/// Bits charged for the range `R`.
pub const DEFAULT_RANGE_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantMsg {
    pub levels: Vec<u32>,
    pub range: f32,
    pub bits: u8,
}

impl QuantMsg {
    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn max_level(&self) -> u32 {
        max_level(self.bits)
    }

    /// Step between adjacent levels.
    pub fn step(&self) -> f64 {
        step_size(self.range as f64, self.bits)
    }

    /// Header `{bits: u8, range: f32 LE, dim: u32 LE}` followed by the
    /// levels packed LSB-first, `bits` bits each.
    pub fn to_bytes(&self) -> Vec<u8> {
        let b = self.bits as usize;
        let mut out = Vec::with_capacity(9 + (b * self.levels.len()).div_ceil(8));
        out.push(self.bits);
        out.extend_from_slice(&self.range.to_le_bytes());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        let mut acc: u64 = 0;
        let mut filled = 0usize;
        for &q in &self.levels {
            acc |= (q as u64) << filled;
            filled += b;
            while filled >= 8 {
                out.push(acc as u8);
                acc >>= 8;
                filled -= 8;
            }
        }
        if filled > 0 {
            out.push(acc as u8);
        }
        out
    }

    /// Inverse of [`QuantMsg::to_bytes`]; rejects truncated or inconsistent
    /// buffers.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::MalformedMessage(what.to_string());
        if bytes.len() < 9 {
            return Err(bad("header truncated"));
        }
        let bits = bytes[0];
        if bits == 0 || bits > MAX_BITS {
            return Err(bad("bits outside 1..=32"));
        }
        let range = f32::from_le_bytes(bytes[1..5].try_into().unwrap());
        if !range.is_finite() || range < 0.0 {
            return Err(bad("range must be finite and nonnegative"));
        }
        let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let b = bits as usize;
        let body = &bytes[9..];
        let needed = dim
            .checked_mul(b)
            .map(|n| n.div_ceil(8))
            .ok_or_else(|| bad("dimension overflow"))?;
        if body.len() != needed {
            return Err(bad("payload length does not match dimension"));
        }
        let mask: u64 = if b == 64 { u64::MAX } else { (1u64 << b) - 1 };
        let mut levels = Vec::with_capacity(dim);
        let mut acc: u64 = 0;
        let mut filled = 0usize;
        let mut iter = body.iter();
        for _ in 0..dim {
            while filled < b {
                let byte = *iter.next().expect("length checked");
                acc |= (byte as u64) << filled;
                filled += 8;
            }
            levels.push((acc & mask) as u32);
            acc >>= b;
            filled -= b;
        }
        if acc != 0 {
            return Err(bad("nonzero padding bits"));
        }
        Ok(QuantMsg {
            levels,
            range,
            bits,
        })
    }
}

/// `2^b - 1`
pub fn max_level(bits: u8) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// `Δ = 2R / (2^b - 1)`
pub fn step_size(range: f64, bits: u8) -> f64 {
    2.0 * range / max_level(bits) as f64
}

/// Transmission cost `b·d + b_R`.
pub fn payload_bits(msg: &QuantMsg, range_bits: u32) -> Result<u64> {
    if range_bits > 32 {
        return Err(Error::InvalidArgument(format!(
            "range bits must be <= 32, got {range_bits}"
        )));
    }
    Ok(msg.bits as u64 * msg.dim() as u64 + range_bits as u64)
}

/// Smallest `f32` that is `>= v` (for finite, nonnegative `v`).
fn f32_round_up(v: f64) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("range {v} overflows f32")));
    }
    if (f as f64) >= v {
        Ok(f)
    } else {
        Ok(f32::from_bits(f.to_bits() + 1))
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidArgument(format!(
            "quantization bits must be in 1..=32, got {bits}"
        )));
    }
    Ok(())
}

/// Quantizes `y` relative to `prev_hat` using `rng` for the rounding coins.
/// Does not touch any state.
pub fn encode_with<R: Rng + ?Sized>(
    y: &[f64],
    prev_hat: &[f64],
    bits: u8,
    rng: &mut R,
) -> Result<QuantMsg> {
    check_bits(bits)?;
    if y.len() != prev_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: prev_hat.len(),
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let max_diff = y
        .iter()
        .zip(prev_hat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if !max_diff.is_finite() {
        return Err(Error::NonFinite("quantizer difference".into()));
    }
    let top = max_level(bits);
    if max_diff == 0.0 {
        return Ok(QuantMsg {
            levels: vec![0; y.len()],
            range: 0.0,
            bits,
        });
    }
    let range32 = f32_round_up(max_diff)?;
    let range = range32 as f64;
    let top_f = top as f64;
    let levels = y
        .iter()
        .zip(prev_hat)
        .map(|(a, b)| {
            let c = (((a - b) + range) * top_f / (2.0 * range)).clamp(0.0, top_f);
            let lo = c.floor();
            let p = c - lo;
            let up = p > 0.0 && rng.random::<f64>() < p;
            (lo as u32) + up as u32
        })
        .collect();
    Ok(QuantMsg {
        levels,
        range: range32,
        bits,
    })
}

/// `ŷ = ŷ_prev + Δ q − R·1`. A zero range returns `prev_hat` unchanged.
pub fn decode(msg: &QuantMsg, prev_hat: &[f64]) -> Result<Vec<f64>> {
    check_bits(msg.bits)?;
    if msg.levels.len() != prev_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: prev_hat.len(),
            got: msg.levels.len(),
        });
    }
    if !msg.range.is_finite() || msg.range < 0.0 {
        return Err(Error::MalformedMessage("range".into()));
    }
    let top = msg.max_level();
    if let Some((index, &level)) = msg.levels.iter().enumerate().find(|(_, &q)| q > top) {
        return Err(Error::LevelOutOfRange {
            index,
            level,
            max: top,
        });
    }
    if msg.range == 0.0 {
        return Ok(prev_hat.to_vec());
    }
    let r = msg.range as f64;
    let delta = msg.step();
    Ok(prev_hat
        .iter()
        .zip(&msg.levels)
        .map(|(p, &q)| p + (delta * q as f64 - r))
        .collect())
}

/// Per-link quantizer state. The sender and the receiver each hold a copy of
/// `prev_hat`; both advance it with [`decode`] so they stay in lockstep.
#[derive(Debug, Clone)]
pub struct QuantState {
    pub prev_hat: Vec<f64>,
    pub bits: u8,
    rng: ChaCha8Rng,
}

impl QuantState {
    /// `stream` separates clients sharing one seed.
    pub fn new(dim: usize, bits: u8, seed: u64, stream: u64) -> Result<Self> {
        check_bits(bits)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(QuantState {
            prev_hat: vec![0.0; dim],
            bits,
            rng,
        })
    }

    /// Encodes `y` and advances `prev_hat` to the reconstruction.
    pub fn encode(&mut self, y: &[f64]) -> Result<QuantMsg> {
        let msg = encode_with(y, &self.prev_hat, self.bits, &mut self.rng)?;
        self.prev_hat = decode(&msg, &self.prev_hat)?;
        Ok(msg)
    }
}

/// Receiver side of one link: tracks the last reconstruction.
#[derive(Debug, Clone)]
pub struct QuantReceiver {
    pub prev_hat: Vec<f64>,
}

impl QuantReceiver {
    pub fn new(dim: usize) -> Self {
        QuantReceiver {
            prev_hat: vec![0.0; dim],
        }
    }

    pub fn receive(&mut self, msg: &QuantMsg) -> Result<&[f64]> {
        self.prev_hat = decode(msg, &self.prev_hat)?;
        Ok(&self.prev_hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_difference_is_degenerate() {
        let mut st = QuantState::new(3, 3, 1, 0).unwrap();
        st.prev_hat = vec![0.5, -1.0, 2.0];
        let msg = st.encode(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(msg.range, 0.0);
        assert_eq!(msg.levels, vec![0, 0, 0]);
        assert_eq!(decode(&msg, &[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        assert_eq!(st.prev_hat, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn top_of_range_is_exact_integer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.5, 3.0, 1.25] {
            let msg = encode_with(&[r], &[0.0], 3, &mut rng).unwrap();
            assert_eq!(msg.range as f64, r);
            assert_eq!(msg.levels, vec![7]);
            assert_eq!(decode(&msg, &[0.0]).unwrap(), vec![r]);
            let msg = encode_with(&[-r], &[0.0], 3, &mut rng).unwrap();
            assert_eq!(msg.levels, vec![0]);
            assert_eq!(decode(&msg, &[0.0]).unwrap(), vec![-r]);
        }
    }

    #[test]
    fn decode_hand_levels() {
        // b=2: L=3, R=1.5, Δ=1; levels map to -1.5, -0.5, 0.5, 1.5
        let msg = QuantMsg {
            levels: vec![0, 1, 2, 3],
            range: 1.5,
            bits: 2,
        };
        let out = decode(&msg, &[10.0; 4]).unwrap();
        assert_eq!(out, vec![8.5, 9.5, 10.5, 11.5]);

        let zero = QuantMsg {
            levels: vec![2, 3],
            range: 0.0,
            bits: 2,
        };
        assert_eq!(decode(&zero, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn decode_rejects_out_of_range_levels() {
        let msg = QuantMsg {
            levels: vec![1, 8],
            range: 1.0,
            bits: 3,
        };
        assert!(matches!(
            decode(&msg, &[0.0, 0.0]),
            Err(Error::LevelOutOfRange {
                index: 1,
                level: 8,
                max: 7
            })
        ));
    }

    #[test]
    fn encode_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(encode_with(&[f64::NAN], &[0.0], 3, &mut rng).is_err());
        assert!(encode_with(&[1.0], &[0.0], 0, &mut rng).is_err());
        assert!(QuantState::new(2, 0, 0, 0).is_err());
        assert!(encode_with(&[1e300], &[0.0], 3, &mut rng).is_err());
    }

    #[test]
    fn payload_formula() {
        let msg = QuantMsg {
            levels: vec![0; 267],
            range: 1.0,
            bits: 3,
        };
        assert_eq!(payload_bits(&msg, 32).unwrap(), 833);
        let one = QuantMsg {
            levels: vec![0],
            range: 1.0,
            bits: 1,
        };
        assert_eq!(payload_bits(&one, 32).unwrap(), 33);
        assert!(payload_bits(&one, 33).is_err());
        let ratio = (32 * 267) as f64 / 833.0;
        assert!((ratio - 10.2569).abs() < 1e-3);
    }

    /// Every combination of rounding outcomes at d=2, b=2 stays within Δ.
    #[test]
    fn exhaustive_rounding_error_bound() {
        let prev = [0.3, -0.7];
        for &(y0, y1) in &[(1.0, -0.2), (0.31, -0.69), (-2.0, 0.0), (0.3, 0.9)] {
            let y = [y0, y1];
            let rng = &mut ChaCha8Rng::seed_from_u64(0);
            let base = encode_with(&y, &prev, 2, rng).unwrap();
            let r = base.range as f64;
            let top = 3.0;
            let cs: Vec<f64> = y
                .iter()
                .zip(&prev)
                .map(|(a, b)| ((a - b) + r) * top / (2.0 * r))
                .collect();
            let delta = base.step();
            for mask in 0..4u32 {
                let levels: Vec<u32> = cs
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        if mask >> j & 1 == 1 {
                            c.ceil() as u32
                        } else {
                            c.floor() as u32
                        }
                    })
                    .collect();
                let msg = QuantMsg {
                    levels,
                    range: base.range,
                    bits: 2,
                };
                let out = decode(&msg, &prev).unwrap();
                for j in 0..2 {
                    assert!((out[j] - y[j]).abs() <= delta * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn monte_carlo_unbiased_d4() {
        let y = [0.9, -0.35, 0.02, 0.6];
        let prev = [0.1, 0.2, -0.3, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 100_000;
        let mut sum = [0.0f64; 4];
        let mut delta = 0.0;
        for _ in 0..trials {
            let msg = encode_with(&y, &prev, 3, &mut rng).unwrap();
            delta = msg.step();
            let out = decode(&msg, &prev).unwrap();
            for j in 0..4 {
                sum[j] += out[j];
            }
        }
        let band = 4.0 * (delta / 2.0) / (trials as f64).sqrt();
        for j in 0..4 {
            let mean = sum[j] / trials as f64;
            assert!((mean - y[j]).abs() <= band, "elem {j}: {mean} vs {}", y[j]);
        }
    }

    #[test]
    fn same_seed_same_levels() {
        let ys: Vec<Vec<f64>> = (0..5)
            .map(|k| (0..6).map(|j| ((k * 7 + j) as f64).sin()).collect())
            .collect();
        let mut a = QuantState::new(6, 3, 42, 3).unwrap();
        let mut b = QuantState::new(6, 3, 42, 3).unwrap();
        let mut c = QuantState::new(6, 3, 42, 4).unwrap();
        let mut differs = false;
        for y in &ys {
            let ma = a.encode(y).unwrap();
            let mb = b.encode(y).unwrap();
            let mc = c.encode(y).unwrap();
            assert_eq!(ma, mb);
            differs |= ma != mc;
        }
        assert!(differs);
    }

    #[test]
    fn serialized_layout() {
        let msg = QuantMsg {
            levels: vec![7, 0, 5],
            range: 2.5,
            bits: 3,
        };
        let bytes = msg.to_bytes();
        assert_eq!(bytes[0], 3);
        assert_eq!(&bytes[1..5], &2.5f32.to_le_bytes());
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        // 111 000 101 -> 0b01_000_111, 0b1
        assert_eq!(&bytes[9..], &[0b0100_0111, 0b1]);
        assert_eq!(QuantMsg::from_bytes(&bytes).unwrap(), msg);
        assert!(QuantMsg::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[10] |= 0b10;
        assert!(QuantMsg::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn lockstep_and_bounded(
            seq in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 5), 1..12),
            bits in 1u8..=8,
            seed in any::<u64>(),
        ) {
            let mut tx = QuantState::new(5, bits, seed, 1).unwrap();
            let mut rx = QuantReceiver::new(5);
            for y in &seq {
                let before = tx.prev_hat.clone();
                let msg = tx.encode(y).unwrap();
                let bytes = msg.to_bytes();
                let wire = QuantMsg::from_bytes(&bytes).unwrap();
                prop_assert_eq!(&wire, &msg);
                prop_assert!(msg.levels.iter().all(|&q| q <= msg.max_level()));
                let got = rx.receive(&wire).unwrap().to_vec();
                prop_assert_eq!(
                    got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    tx.prev_hat.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
                let delta = msg.step();
                for j in 0..5 {
                    let scale = y[j].abs().max(before[j].abs()).max(1.0);
                    prop_assert!((got[j] - y[j]).abs() <= delta + 1e-12 * scale);
                }
            }
        }
    }
}
