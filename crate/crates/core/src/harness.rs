//! Experiment runner: dataset loading, `f★` caching, per-round metrics CSVs
//! and rounds/bits-to-target summaries.
//!
//! Metrics CSV schema (fixed column order):
//!
//! ```text
//! round,f,gap,up_bits_cum,down_bits_cum[,<diagnostic columns>]
//! ```
//!
//! Row `k` (1-based) describes the model after `k` rounds; bit columns are
//! cumulative per client. Floats are written in shortest round-trip form, so
//! identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{self, exact_newton, AlgoConfig, AlgorithmKind, FedNew, FedNewParams, FederatedOptimizer, QuantParams, RoundReport};
use crate::config::{AlgoBlock, ExperimentConfig};
use crate::dataset::{self, parse_libsvm, parse_libsvm_str, ClientShard, ParseOptions, ShardOptions};
use crate::diagnostics::{self, default_beta1, estimate_lq, fednew_round_diagnostics, RoundDiagnostics};
use crate::error::{Error, Result};
use crate::objective::{global_loss, LocalObjective};
use crate::protocol::{AccountingRules, Bus};

/// Newton iterations behind `f★`.
pub const FSTAR_ITERS: usize = 30;

pub const THREADS_ENV: &str = "FEDNEW_THREADS";

pub const BASE_COLUMNS: [&str; 5] = ["round", "f", "gap", "up_bits_cum", "down_bits_cum"];

/// Client shards plus bookkeeping about where they came from.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub name: String,
    pub shards: Vec<ClientShard>,
    pub hash: String,
    pub n_samples_read: usize,
    pub warnings: usize,
}

impl LoadedData {
    pub fn dim(&self) -> usize {
        self.shards[0].dim
    }

    pub fn samples_per_client(&self) -> usize {
        self.shards[0].len()
    }
}

/// Reads (or synthesizes) the dataset and splits it across clients.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let ds_cfg = &cfg.dataset;
    let opts = ParseOptions {
        dim_override: ds_cfg.dim_override,
    };
    let (name, dataset) = match (&ds_cfg.path, &ds_cfg.synthetic) {
        (Some(path), _) => {
            let full = cfg.resolve(path);
            let file = fs::File::open(&full)
                .map_err(|e| Error::DatasetMissing(format!("{}: {e}", full.display())))?;
            let name = full
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            (name, parse_libsvm(std::io::BufReader::new(file), opts)?)
        }
        (None, Some(profile)) => {
            let p = crate::synth::profile(profile)?;
            let text = crate::synth::generate(&p, ds_cfg.synthetic_seed);
            let opts = ParseOptions {
                dim_override: ds_cfg.dim_override.or(Some(p.dim)),
            };
            (format!("synthetic-{profile}"), parse_libsvm_str(&text, opts)?)
        }
        (None, None) => return Err(Error::Config("no dataset source".into())),
    };
    let n_samples_read = dataset.len();
    let shards = dataset::shard(
        &dataset,
        &ShardOptions {
            n_clients: ds_cfg.n_clients,
            mu: ds_cfg.mu,
            truncate_to_multiple: ds_cfg.truncate_to_multiple,
            shuffle_seed: ds_cfg.shuffle_seed,
        },
    )?;
    let mut warnings = 0;
    if let Some(exp) = &ds_cfg.expect {
        let mut check = |what: &str, want: Option<usize>, got: usize| {
            if let Some(w) = want {
                if w != got {
                    warn!("{name}: expected {what} = {w}, found {got}");
                    warnings += 1;
                }
            }
        };
        check("N", exp.n_samples, n_samples_read);
        check("m", exp.samples_per_client, shards[0].len());
        check("d", exp.dim, dataset.dim);
        check("n", exp.n_clients, shards.len());
    }
    let hash = dataset::shards_hash(&shards);
    Ok(LoadedData {
        name,
        shards,
        hash,
        n_samples_read,
        warnings,
    })
}

/// Cached reference optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FStar {
    pub dataset_hash: String,
    pub mu: f64,
    pub iterations: usize,
    pub f_star: f64,
    pub grad_norm: f64,
    pub values: Vec<f64>,
    pub x_star: Vec<f64>,
}

/// Runs the reference Newton method from `x = 0`.
pub fn compute_fstar(data: &LoadedData) -> Result<FStar> {
    let trace = exact_newton(&data.shards, vec![0.0; data.dim()], FSTAR_ITERS)?;
    Ok(FStar {
        dataset_hash: data.hash.clone(),
        mu: data.shards[0].mu,
        iterations: FSTAR_ITERS,
        f_star: trace.f_star,
        grad_norm: trace.grad_norm,
        values: trace.values,
        x_star: trace.x_star,
    })
}

pub fn fstar_cache_path(cfg: &ExperimentConfig, out_dir: &Path, data: &LoadedData) -> PathBuf {
    if let Some(p) = cfg.algo.iter().find_map(|a| a.fstar_cache_path.as_ref()) {
        return cfg.resolve(p);
    }
    out_dir.join(format!("fstar-{}.json", &data.hash[..16]))
}

/// Loads `f★` from `cache` when its key matches, else computes and stores it.
pub fn fstar_cached(data: &LoadedData, cache: &Path) -> Result<FStar> {
    let mu = data.shards[0].mu;
    if let Ok(text) = fs::read_to_string(cache) {
        match serde_json::from_str::<FStar>(&text) {
            Ok(f)
                if f.dataset_hash == data.hash
                    && f.mu.to_bits() == mu.to_bits()
                    && f.iterations == FSTAR_ITERS =>
            {
                return Ok(f);
            }
            Ok(_) => info!("{}: stale f* cache, recomputing", cache.display()),
            Err(e) => warn!("{}: unreadable f* cache ({e}), recomputing", cache.display()),
        }
    }
    let f = compute_fstar(data)?;
    let json = serde_json::to_string_pretty(&f).map_err(|e| Error::Io(e.into()))?;
    write_atomic(cache, json.as_bytes())?;
    Ok(f)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub f: f64,
    pub gap: f64,
    pub up_bits_cum: u64,
    pub down_bits_cum: u64,
    /// Not written to the CSV (it would break byte-identical reruns).
    pub wall_time_s: f64,
    pub diag: Option<RoundDiagnostics>,
}

pub fn csv_header(with_diag: bool) -> String {
    let mut cols: Vec<&str> = BASE_COLUMNS.to_vec();
    if with_diag {
        cols.extend(RoundDiagnostics::COLUMNS);
    }
    cols.join(",")
}

pub fn render_csv(rows: &[RoundMetrics], with_diag: bool) -> String {
    let mut out = csv_header(with_diag);
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{:e},{:e},{},{}",
            r.round, r.f, r.gap, r.up_bits_cum, r.down_bits_cum
        );
        if with_diag {
            match &r.diag {
                Some(d) => d.values().iter().for_each(|v| {
                    let _ = write!(out, ",{v:e}");
                }),
                None => RoundDiagnostics::COLUMNS.iter().for_each(|_| out.push(',')),
            }
        }
        out.push('\n');
    }
    out
}

/// Base columns of a metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub f: f64,
    pub gap: f64,
    pub up_bits_cum: u64,
    pub down_bits_cum: u64,
}

/// Parses a metrics CSV; extra (diagnostic) columns are ignored.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let bad = |m: String| Error::MalformedMessage(format!("metrics csv: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < BASE_COLUMNS.len() || cols[..BASE_COLUMNS.len()] != BASE_COLUMNS {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(bad(format!("line {}: expected {} fields", i + 2, cols.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| bad(format!("line {}: bad number `{s}`", i + 2)))
        };
        let int = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| bad(format!("line {}: bad integer `{s}`", i + 2)))
        };
        rows.push(CsvRow {
            round: int(f[0])? as usize,
            f: num(f[1])?,
            gap: num(f[2])?,
            up_bits_cum: int(f[3])?,
            down_bits_cum: int(f[4])?,
        });
    }
    Ok(rows)
}

/// First point at which an algorithm reached a target gap.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub target: f64,
    /// `None` when the target was never reached.
    pub reached: Option<CsvRow>,
}

pub fn first_reaching(rows: &[CsvRow], target: f64) -> Option<CsvRow> {
    rows.iter().find(|r| r.gap <= target).copied()
}

pub fn summarize_rows(label: &str, rows: &[CsvRow], targets: &[f64]) -> Result<Vec<SummaryRow>> {
    if let Some(t) = targets.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidArgument(format!("target gap must be > 0, got {t}")));
    }
    Ok(targets
        .iter()
        .map(|&target| SummaryRow {
            label: label.to_string(),
            target,
            reached: first_reaching(rows, target),
        })
        .collect())
}

pub const SUMMARY_HEADER: &str = "algorithm,target_gap,round,up_bits,total_bits";

/// CSV form; unreached targets print `not reached`.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        match r.reached {
            Some(c) => {
                let _ = writeln!(
                    out,
                    "{},{:e},{},{},{}",
                    r.label,
                    r.target,
                    c.round,
                    c.up_bits_cum,
                    c.up_bits_cum + c.down_bits_cum
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{},{:e},not reached,not reached,not reached",
                    r.label, r.target
                );
            }
        }
    }
    out
}

/// Reads metrics CSVs and summarizes each against `targets`; the label is the
/// file stem.
pub fn summarize_files(paths: &[PathBuf], targets: &[f64]) -> Result<Vec<SummaryRow>> {
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p)?;
        let rows = parse_metrics_csv(&text)?;
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.extend(summarize_rows(&label, &rows, targets)?);
    }
    Ok(out)
}

/// Result of one algorithm run.
#[derive(Debug, Clone)]
pub struct AlgoRun {
    pub label: String,
    pub config: AlgoConfig,
    pub rows: Vec<RoundMetrics>,
    pub clamp_warnings: usize,
    pub csv_path: Option<PathBuf>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dataset: String,
    pub fstar: FStar,
    pub runs: Vec<AlgoRun>,
    pub summary: Vec<SummaryRow>,
    pub expectation_warnings: usize,
}

impl RunReport {
    pub fn clamp_warnings(&self) -> usize {
        self.runs.iter().map(|r| r.clamp_warnings).sum()
    }

    pub fn run(&self, label: &str) -> Option<&AlgoRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Write CSVs and the summary; `false` keeps everything in memory.
    pub write_files: bool,
}

/// Parallelism cap from `FEDNEW_THREADS` (unset or invalid: rayon default).
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` inside a rayon pool with `threads` workers.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Deterministic probe points around `x0` for the `L_q` estimate.
pub fn lq_probes(x0: &[f64], count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c71_7072_6f62_6573);
    (0..count)
        .map(|p| {
            let x: Vec<f64> = if p == 0 {
                x0.to_vec()
            } else {
                x0.iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect()
            };
            let y: Vec<f64> = x0.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            (x, y)
        })
        .collect()
}

fn record_row<O: LocalObjective>(
    clients: &[O],
    x: &[f64],
    round: usize,
    bus: &Bus,
    f_star: f64,
    started: Instant,
    clamps: &mut usize,
) -> Result<RoundMetrics> {
    let f = global_loss(clients, x)?;
    let gap = diagnostics::optimality_gap(f, f_star);
    if gap.clamped {
        *clamps += 1;
    }
    Ok(RoundMetrics {
        round,
        f,
        gap: gap.value,
        up_bits_cum: bus.ledger().up_per_client(),
        down_bits_cum: bus.ledger().down_per_client(),
        wall_time_s: started.elapsed().as_secs_f64(),
        diag: None,
    })
}

/// Runs one algorithm for `cfg.max_rounds` rounds and collects metrics.
pub fn run_algorithm<O: LocalObjective>(
    clients: &[O],
    cfg: &AlgoConfig,
    rules: AccountingRules,
    f_star: f64,
    diag: Option<&crate::config::DiagBlock>,
    keep_log: bool,
) -> Result<(Vec<RoundMetrics>, usize, Bus)> {
    let n = clients.len();
    let d = clients[0].dim();
    let x0 = vec![0.0; d];
    let mut bus = Bus::new(n, rules);
    if keep_log {
        bus = bus.with_log();
    }
    let started = Instant::now();
    let mut rows = Vec::with_capacity(cfg.max_rounds);
    let mut clamps = 0;

    let fednew_like = matches!(cfg.kind, AlgorithmKind::FedNew | AlgorithmKind::QFedNew);
    match (fednew_like, diag.filter(|d| d.enabled)) {
        (true, Some(diag)) => {
            cfg.validate()?;
            let quant = (cfg.kind == AlgorithmKind::QFedNew).then_some(QuantParams {
                bits: cfg.bits,
                range_bits: cfg.range_bits,
                seed: cfg.seed,
            });
            let params = FedNewParams {
                alpha: cfg.alpha,
                rho: cfg.rho,
                hessian_rate: cfg.hessian_rate,
                inner_passes: cfg.inner_passes,
                quant,
            };
            let probes = lq_probes(&x0, diag.lq_probes, cfg.seed);
            let lq = estimate_lq(clients, &probes, cfg.alpha)?;
            let beta1 = diag.beta1.unwrap_or_else(|| default_beta1(lq, cfg.rho));
            let mut alg = FedNew::new(clients, params, x0)?;
            for _ in 0..cfg.max_rounds {
                let rep: RoundReport = alg.round(&mut bus)?;
                let prev = rep.prev_direction.as_deref().unwrap_or(&[]);
                let d = fednew_round_diagnostics(&alg, prev, lq, beta1)
                    .map_err(|e| e.in_round(rep.round))?;
                let mut row =
                    record_row(clients, alg.model(), rep.round + 1, &bus, f_star, started, &mut clamps)?;
                row.diag = Some(d);
                rows.push(row);
            }
        }
        _ => {
            let mut alg = algorithms::build(cfg, clients, x0)?;
            for _ in 0..cfg.max_rounds {
                let rep = alg.round(&mut bus)?;
                rows.push(record_row(
                    clients,
                    alg.model(),
                    rep.round + 1,
                    &bus,
                    f_star,
                    started,
                    &mut clamps,
                )?);
            }
        }
    }
    Ok((rows, clamps, bus))
}

fn algo_config(block: &AlgoBlock, cfg: &ExperimentConfig, seed_override: Option<u64>) -> Result<AlgoConfig> {
    let mut ac = block.to_algo_config(seed_override.unwrap_or(cfg.seed))?;
    if let (Some(s), None) = (seed_override, block.seed) {
        ac.seed = s;
    }
    Ok(ac)
}

/// Full experiment: every `[[algo]]` block against the configured dataset.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let data = load_data(cfg)?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.resolve(&cfg.output.dir));
    let fstar = if opts.write_files {
        fstar_cached(&data, &fstar_cache_path(cfg, &out_dir, &data))?
    } else {
        compute_fstar(&data)?
    };
    let rules = AccountingRules {
        symmetric_matrices: cfg.account.symmetric_matrices,
    };
    let with_diag = cfg.diag.enabled;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for block in &cfg.algo {
        let label = block.label().to_string();
        let ac = algo_config(block, cfg, opts.seed)?;
        let started = Instant::now();
        let (rows, clamps, bus) = run_algorithm(
            &data.shards,
            &ac,
            rules,
            fstar.f_star,
            Some(&cfg.diag),
            cfg.output.message_log,
        )?;
        let wall = started.elapsed().as_secs_f64();
        info!("{label}: {} rounds in {wall:.2}s", rows.len());
        let csv_path = if opts.write_files {
            let path = out_dir.join(format!("{label}.csv"));
            let diag_cols = with_diag && matches!(ac.kind, AlgorithmKind::FedNew | AlgorithmKind::QFedNew);
            write_atomic(&path, render_csv(&rows, diag_cols).as_bytes())?;
            if cfg.output.message_log {
                let mut buf = Vec::new();
                bus.write_log(&mut buf)?;
                write_atomic(&out_dir.join(format!("{label}.messages.csv")), &buf)?;
            }
            Some(path)
        } else {
            None
        };
        let csv_rows: Vec<CsvRow> = rows
            .iter()
            .map(|r| CsvRow {
                round: r.round,
                f: r.f,
                gap: r.gap,
                up_bits_cum: r.up_bits_cum,
                down_bits_cum: r.down_bits_cum,
            })
            .collect();
        summary.extend(summarize_rows(&label, &csv_rows, &cfg.summary.targets)?);
        runs.push(AlgoRun {
            label,
            config: ac,
            rows,
            clamp_warnings: clamps,
            csv_path,
            wall_time_s: wall,
        });
    }
    if opts.write_files {
        write_atomic(&out_dir.join("summary.csv"), render_summary(&summary).as_bytes())?;
    }
    Ok(RunReport {
        dataset: data.name,
        fstar,
        runs,
        summary,
        expectation_warnings: data.warnings,
    })
}
