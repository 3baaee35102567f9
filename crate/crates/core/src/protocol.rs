//! Simulated parameter-server message bus and bit accounting.
//!
//! Bits are charged by formula, never by in-memory size:
//!
//! | kind                | bits            |
//! |---------------------|-----------------|
//! | `DenseVector`       | `32·d`          |
//! | `QuantizedVector`   | `b·d + b_R`     |
//! | `DenseMatrix`       | `32·d²` (or `32·d(d+1)/2` with symmetric accounting) |
//! | `ModelAndDirection` | `2·32·d`        |
//!
//! A broadcast is one message charged once to every receiving client.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FLOAT_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upstream,
    Downstream,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Upstream => "up",
            Direction::Downstream => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    DenseVector { dim: usize },
    QuantizedVector { dim: usize, bits: u8, range_bits: u32 },
    DenseMatrix { dim: usize },
    ModelAndDirection { dim: usize },
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::DenseVector { .. } => "dense_vector",
            MessageKind::QuantizedVector { .. } => "quantized_vector",
            MessageKind::DenseMatrix { .. } => "dense_matrix",
            MessageKind::ModelAndDirection { .. } => "model_and_direction",
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            MessageKind::DenseVector { dim }
            | MessageKind::QuantizedVector { dim, .. }
            | MessageKind::DenseMatrix { dim }
            | MessageKind::ModelAndDirection { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccountingRules {
    /// Charge dense matrices for the upper triangle only.
    pub symmetric_matrices: bool,
}

impl AccountingRules {
    pub fn account(&self, kind: &MessageKind) -> u64 {
        match *kind {
            MessageKind::DenseVector { dim } => FLOAT_BITS * dim as u64,
            MessageKind::QuantizedVector {
                dim,
                bits,
                range_bits,
            } => bits as u64 * dim as u64 + range_bits as u64,
            MessageKind::DenseMatrix { dim } => {
                let d = dim as u64;
                if self.symmetric_matrices {
                    FLOAT_BITS * d * (d + 1) / 2
                } else {
                    FLOAT_BITS * d * d
                }
            }
            MessageKind::ModelAndDirection { dim } => 2 * FLOAT_BITS * dim as u64,
        }
    }
}

/// Bit cost of a message under the default (naive) rules.
pub fn account(kind: &MessageKind) -> u64 {
    AccountingRules::default().account(kind)
}

/// Who a message concerns: one sender, or every client for a broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peer {
    Client(usize),
    All,
}

/// One entry of the audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub round: usize,
    pub peer: Peer,
    pub direction: Direction,
    pub kind: MessageKind,
    pub bits: u64,
}

pub const LOG_HEADER: &str = "round,client,direction,kind,dim,bits,b,b_r";

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let client = match self.peer {
            Peer::Client(c) => c.to_string(),
            Peer::All => "all".to_string(),
        };
        let (b, br) = match self.kind {
            MessageKind::QuantizedVector {
                bits, range_bits, ..
            } => (bits.to_string(), range_bits.to_string()),
            _ => (String::new(), String::new()),
        };
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.round,
            client,
            self.direction.as_str(),
            self.kind.name(),
            self.kind.dim(),
            self.bits,
            b,
            br
        )
    }
}

impl FromStr for LogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::MalformedMessage(format!("log record `{line}`: {what}"));
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let round = fields[0].parse().map_err(|_| bad("round"))?;
        let peer = match fields[1] {
            "all" => Peer::All,
            c => Peer::Client(c.parse().map_err(|_| bad("client"))?),
        };
        let direction = match fields[2] {
            "up" => Direction::Upstream,
            "down" => Direction::Downstream,
            _ => return Err(bad("direction")),
        };
        let dim: usize = fields[4].parse().map_err(|_| bad("dim"))?;
        let kind = match fields[3] {
            "dense_vector" => MessageKind::DenseVector { dim },
            "dense_matrix" => MessageKind::DenseMatrix { dim },
            "model_and_direction" => MessageKind::ModelAndDirection { dim },
            "quantized_vector" => {
                let bits: u8 = fields[6].parse().map_err(|_| bad("b"))?;
                let range_bits: u32 = fields[7].parse().map_err(|_| bad("b_r"))?;
                if bits == 0 || bits > 32 || range_bits > 32 {
                    return Err(bad("quantizer bits out of range"));
                }
                MessageKind::QuantizedVector {
                    dim,
                    bits,
                    range_bits,
                }
            }
            other => return Err(Error::UnknownKind(other.to_string())),
        };
        let bits = fields[5].parse().map_err(|_| bad("bits"))?;
        Ok(LogRecord {
            round,
            peer,
            direction,
            kind,
            bits,
        })
    }
}

/// Parses a message log written by [`Bus::write_log`].
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == LOG_HEADER => {}
        _ => return Err(Error::MalformedMessage("missing log header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(LogRecord::from_str)
        .collect()
}

/// Bits summed for one round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundBits {
    pub round: usize,
    /// All upstream bits of the round, over all clients.
    pub up_total: u64,
    /// All downstream bits of the round, counted once per receiving client.
    pub down_total: u64,
}

/// Cumulative per-client bit counts plus a per-round breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct BitLedger {
    up: Vec<u64>,
    down: Vec<u64>,
    rounds: Vec<RoundBits>,
}

impl BitLedger {
    pub fn new(n_clients: usize) -> Self {
        BitLedger {
            up: vec![0; n_clients],
            down: vec![0; n_clients],
            rounds: Vec::new(),
        }
    }

    pub fn n_clients(&self) -> usize {
        self.up.len()
    }

    pub fn up_bits(&self, client: usize) -> u64 {
        self.up[client]
    }

    pub fn down_bits(&self, client: usize) -> u64 {
        self.down[client]
    }

    /// Largest cumulative upstream count over clients.
    pub fn up_per_client(&self) -> u64 {
        self.up.iter().copied().max().unwrap_or(0)
    }

    pub fn down_per_client(&self) -> u64 {
        self.down.iter().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.up.iter().sum::<u64>() + self.down.iter().sum::<u64>()
    }

    pub fn rounds(&self) -> &[RoundBits] {
        &self.rounds
    }

    fn round_entry(&mut self, round: usize) -> &mut RoundBits {
        if self.rounds.last().is_none_or(|r| r.round != round) {
            self.rounds.push(RoundBits {
                round,
                ..Default::default()
            });
        }
        self.rounds.last_mut().unwrap()
    }

    pub fn record(&mut self, rec: &LogRecord) -> Result<()> {
        let n = self.n_clients();
        match (rec.direction, rec.peer) {
            (Direction::Upstream, Peer::Client(c)) if c < n => {
                self.up[c] += rec.bits;
                self.round_entry(rec.round).up_total += rec.bits;
            }
            (Direction::Downstream, Peer::All) => {
                self.down.iter_mut().for_each(|d| *d += rec.bits);
                self.round_entry(rec.round).down_total += rec.bits * n as u64;
            }
            (Direction::Downstream, Peer::Client(c)) if c < n => {
                self.down[c] += rec.bits;
                self.round_entry(rec.round).down_total += rec.bits;
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "record addressed outside {n} clients: {rec}"
                )))
            }
        }
        Ok(())
    }

    /// Rebuilds a ledger from a recorded log, re-deriving each message's bits.
    pub fn replay(n_clients: usize, rules: AccountingRules, log: &[LogRecord]) -> Result<Self> {
        let mut ledger = BitLedger::new(n_clients);
        for rec in log {
            let mut rec = rec.clone();
            rec.bits = rules.account(&rec.kind);
            ledger.record(&rec)?;
        }
        Ok(ledger)
    }
}

/// An upstream payload tagged with its sender and wire kind.
#[derive(Debug, Clone)]
pub struct Envelope<T> {
    pub client: usize,
    pub kind: MessageKind,
    pub payload: T,
}

/// Synchronous, reliable in-memory bus between `n` clients and the server.
#[derive(Debug, Clone)]
pub struct Bus {
    n_clients: usize,
    rules: AccountingRules,
    ledger: BitLedger,
    log: Option<Vec<LogRecord>>,
}

impl Bus {
    pub fn new(n_clients: usize, rules: AccountingRules) -> Self {
        Bus {
            n_clients,
            rules,
            ledger: BitLedger::new(n_clients),
            log: None,
        }
    }

    /// Keeps every message in memory for [`Bus::write_log`].
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn rules(&self) -> AccountingRules {
        self.rules
    }

    pub fn ledger(&self) -> &BitLedger {
        &self.ledger
    }

    pub fn log(&self) -> Option<&[LogRecord]> {
        self.log.as_deref()
    }

    fn push(&mut self, rec: LogRecord) -> Result<()> {
        self.ledger.record(&rec)?;
        if let Some(log) = &mut self.log {
            log.push(rec);
        }
        Ok(())
    }

    /// Collects exactly one message from each client; returns the payloads
    /// ordered by client id.
    pub fn gather<T>(&mut self, round: usize, mut msgs: Vec<Envelope<T>>) -> Result<Vec<T>> {
        msgs.sort_by_key(|m| m.client);
        for (expected, m) in msgs.iter().enumerate() {
            if m.client != expected {
                return Err(Error::MissingClient {
                    round,
                    expected: self.n_clients,
                    missing: expected,
                });
            }
        }
        if msgs.len() != self.n_clients {
            return Err(Error::MissingClient {
                round,
                expected: self.n_clients,
                missing: msgs.len().min(self.n_clients),
            });
        }
        let mut out = Vec::with_capacity(msgs.len());
        for m in msgs {
            let bits = self.rules.account(&m.kind);
            self.push(LogRecord {
                round,
                peer: Peer::Client(m.client),
                direction: Direction::Upstream,
                kind: m.kind,
                bits,
            })?;
            out.push(m.payload);
        }
        Ok(out)
    }

    /// Server to every client; charged once per client.
    pub fn broadcast(&mut self, round: usize, kind: MessageKind) -> Result<()> {
        let bits = self.rules.account(&kind);
        self.push(LogRecord {
            round,
            peer: Peer::All,
            direction: Direction::Downstream,
            kind,
            bits,
        })
    }

    pub fn write_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{LOG_HEADER}")?;
        for rec in self.log.iter().flatten() {
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}
