//! Cost harness for secure aggregation: key generation, masking, aggregation
//! and message size across user counts and embedding dimensions.
//!
//! Vectors have the length of a model with `n` layers and embedding size `d`.
//! Timings are wall-clock; scenarios run one after another on a dedicated
//! thread pool.

use crate::dynamic_gnn::{Activation, Hyperparams};
use crate::graph_model::DEFAULT_FEATURE_LEN;
use crate::secure_agg::{self, InProcessChannel, MaskedVector, SecureAggError, SecureParams};
use num_bigint::{BigUint, RandBigInt};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("repeats must be at least {min}, got {got}")]
    TooFewRepeats { min: usize, got: usize },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("no results to report")]
    NoResults,
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Secure(#[from] SecureAggError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub const MIN_REPEATS: usize = 3;
pub const DEFAULT_REPEATS: usize = 50;
/// Allowed relative drop between adjacent grid points in trend checks.
pub const TREND_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Keygen,
    Masking,
    Aggregation,
    CommSize,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Keygen => "keygen",
            Scenario::Masking => "masking",
            Scenario::Aggregation => "aggregation",
            Scenario::CommSize => "comm_size",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: Scenario,
    pub m: usize,
    pub d: usize,
    pub param_count: usize,
    pub repeats: usize,
    pub mean: f64,
    pub stddev: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub m_values: Vec<usize>,
    pub d_values: Vec<usize>,
    pub repeats: usize,
    pub n_layers: usize,
    /// Worker threads for masking and aggregation; `None` uses every core.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            m_values: vec![2, 5, 10, 20],
            d_values: vec![32, 64, 128],
            repeats: DEFAULT_REPEATS,
            n_layers: 2,
            threads: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub threads: usize,
    pub modulus_bits: u64,
}

/// Parameter count of a model with embedding size `d`.
pub fn param_count(d: usize, n_layers: usize) -> usize {
    Hyperparams::new(d, DEFAULT_FEATURE_LEN, n_layers, 0.1, 0.1, Activation::Tanh).param_count()
}

fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn timed<T>(f: impl FnOnce() -> T) -> (f64, T) {
    let start = Instant::now();
    let out = f();
    (start.elapsed().as_secs_f64(), out)
}

/// Runs every scenario on every `(m, d)` grid point.
pub fn run_bench(cfg: &BenchConfig, params: &SecureParams) -> Result<BenchReport> {
    if cfg.repeats < MIN_REPEATS {
        return Err(BenchError::TooFewRepeats {
            min: MIN_REPEATS,
            got: cfg.repeats,
        });
    }
    if cfg.m_values.is_empty() || cfg.d_values.is_empty() {
        return Err(BenchError::EmptyGrid);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| BenchError::ThreadPool(e.to_string()))?;
    let threads = pool.current_num_threads();
    let results = pool.install(|| run_grid(cfg, params))?;
    Ok(BenchReport {
        results,
        threads,
        modulus_bits: params.n.bits(),
    })
}

fn run_grid(cfg: &BenchConfig, params: &SecureParams) -> Result<Vec<BenchResult>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();
    for &m in &cfg.m_values {
        let ids: Vec<u64> = (0..m as u64).collect();
        for &d in &cfg.d_values {
            let p = param_count(d, cfg.n_layers);
            let result = |scenario, samples: &[f64], unit: &str| {
                let (mean, stddev) = mean_stddev(samples);
                BenchResult {
                    scenario,
                    m,
                    d,
                    param_count: p,
                    repeats: samples.len(),
                    mean,
                    stddev,
                    unit: unit.to_string(),
                }
            };

            // untimed warm-up so the first grid point does not pay for cold caches
            let mut keys = secure_agg::keygen(params, &ids, &mut InProcessChannel::default(), &mut rng)?;
            let mut samples = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let (secs, k) = timed(|| secure_agg::keygen(params, &ids, &mut InProcessChannel::default(), &mut rng));
                keys = k?;
                samples.push(secs);
            }
            results.push(result(Scenario::Keygen, &samples, "seconds"));

            let values: Vec<Vec<BigUint>> = (0..m)
                .map(|_| (0..p).map(|_| rng.gen_biguint_below(&params.n)).collect())
                .collect();
            let mut round = 0u32;
            let mut next_tag = || {
                round += 1;
                secure_agg::round_tag(params.session_id, round)
            };

            let t = next_tag();
            secure_agg::mask(&values[0], &mut keys[0], params, t)?;
            let mut samples = Vec::with_capacity(cfg.repeats);
            let mut one: Option<MaskedVector> = None;
            for _ in 0..cfg.repeats {
                let t = next_tag();
                let (secs, mv) = timed(|| secure_agg::mask(&values[0], &mut keys[0], params, t));
                one = Some(mv?);
                samples.push(secs);
            }
            results.push(result(Scenario::Masking, &samples, "seconds"));

            // every user masks once; the server's work is what gets timed
            let t = next_tag();
            let masked = values
                .iter()
                .zip(keys.iter_mut())
                .map(|(v, k)| secure_agg::mask(v, k, params, t))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            secure_agg::aggregate(&masked, params)?;
            let mut samples = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let (secs, sums) = timed(|| secure_agg::aggregate(&masked, params));
                sums?;
                samples.push(secs);
            }
            results.push(result(Scenario::Aggregation, &samples, "seconds"));

            let bytes = secure_agg::encode_wire(&one.expect("at least one repeat"), params).len() as f64;
            results.push(result(Scenario::CommSize, &vec![bytes; cfg.repeats], "bytes"));
        }
    }
    Ok(results)
}

/// Adjacent grid points where a cost that should grow drops by more than
/// `tolerance`, plus any message size that differs from the closed form.
pub fn trend_violations(results: &[BenchResult], params: &SecureParams, tolerance: f64) -> Vec<String> {
    let mut out = Vec::new();
    let series = |scenario: Scenario, fixed_m: bool| {
        let mut keys: Vec<usize> = results
            .iter()
            .filter(|r| r.scenario == scenario)
            .map(|r| if fixed_m { r.m } else { r.d })
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|key| {
                let mut pts: Vec<&BenchResult> = results
                    .iter()
                    .filter(|r| r.scenario == scenario && key == if fixed_m { r.m } else { r.d })
                    .collect();
                pts.sort_by_key(|r| if fixed_m { r.d } else { r.m });
                pts
            })
            .collect::<Vec<_>>()
    };
    let mut check = |scenario: Scenario, fixed_m: bool| {
        for pts in series(scenario, fixed_m) {
            for w in pts.windows(2) {
                if w[1].mean < w[0].mean * (1.0 - tolerance) {
                    out.push(format!(
                        "{scenario}: mean {:.6e} at (m={}, d={}) is below {:.6e} at (m={}, d={})",
                        w[1].mean, w[1].m, w[1].d, w[0].mean, w[0].m, w[0].d
                    ));
                }
            }
        }
    };
    check(Scenario::Masking, true);
    check(Scenario::Keygen, false);
    check(Scenario::Aggregation, false);
    for r in results.iter().filter(|r| r.scenario == Scenario::CommSize) {
        let expected = secure_agg::wire_size(r.param_count, params) as f64;
        if r.mean != expected || r.stddev != 0.0 {
            out.push(format!(
                "comm_size at (m={}, d={}): {} bytes, closed form {}",
                r.m, r.d, r.mean, expected
            ));
        }
    }
    out
}

/// Writes the CSV and returns a human summary that lists trend violations.
pub fn emit_report<W: Write>(report: &BenchReport, params: &SecureParams, out: W) -> Result<String> {
    if report.results.is_empty() {
        return Err(BenchError::NoResults);
    }
    let mut w = csv::Writer::from_writer(out);
    for r in &report.results {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;

    let mut summary = format!(
        "{} results, {}-bit modulus, {} thread(s)\n",
        report.results.len(),
        report.modulus_bits,
        report.threads
    );
    for r in &report.results {
        summary.push_str(&format!(
            "  {:<11} m={:<3} d={:<4} P={:<6} {:.6e} ± {:.2e} {}\n",
            r.scenario.to_string(),
            r.m,
            r.d,
            r.param_count,
            r.mean,
            r.stddev,
            r.unit
        ));
    }
    let violations = trend_violations(&report.results, params, TREND_TOLERANCE);
    if violations.is_empty() {
        summary.push_str("trend checks: ok\n");
    } else {
        summary.push_str("trend violations:\n");
        for v in violations {
            summary.push_str(&format!("  {v}\n"));
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn params() -> &'static SecureParams {
        static P: OnceLock<SecureParams> = OnceLock::new();
        P.get_or_init(|| secure_agg::setup_params(512, 20, Some(5), 1).unwrap().0)
    }

    fn small() -> BenchConfig {
        BenchConfig {
            m_values: vec![2, 3],
            d_values: vec![2, 4],
            repeats: 3,
            threads: Some(1),
            ..BenchConfig::default()
        }
    }

    #[test]
    fn param_count_follows_the_layout() {
        assert_eq!(param_count(32, 2), 4768);
        assert_eq!(param_count(64, 2), 64 * 19 + 4 * 64 * 64 + 128);
    }

    #[test]
    fn grid_produces_every_scenario() {
        let report = run_bench(&small(), params()).unwrap();
        assert_eq!(report.results.len(), 4 * 4);
        assert_eq!(report.threads, 1);
        assert!(report.results.iter().all(|r| r.repeats == 3 && r.mean >= 0.0 && r.stddev >= 0.0));
        for r in report.results.iter().filter(|r| r.scenario == Scenario::CommSize) {
            assert_eq!(r.mean as usize, 24 + r.param_count * 128);
        }
    }

    #[test]
    fn comm_size_is_deterministic() {
        let a = run_bench(&small(), params()).unwrap();
        let b = run_bench(&small(), params()).unwrap();
        let sizes = |r: &BenchReport| {
            r.results
                .iter()
                .filter(|x| x.scenario == Scenario::CommSize)
                .map(|x| x.mean)
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(&a), sizes(&b));
    }

    #[test]
    fn too_few_repeats_or_empty_grid_are_rejected() {
        let cfg = BenchConfig { repeats: 2, ..small() };
        assert!(matches!(run_bench(&cfg, params()), Err(BenchError::TooFewRepeats { .. })));
        let cfg = BenchConfig { m_values: vec![], ..small() };
        assert!(matches!(run_bench(&cfg, params()), Err(BenchError::EmptyGrid)));
    }

    fn row(scenario: Scenario, m: usize, d: usize, mean: f64) -> BenchResult {
        BenchResult {
            scenario,
            m,
            d,
            param_count: param_count(d, 2),
            repeats: 3,
            mean,
            stddev: 0.0,
            unit: "seconds".into(),
        }
    }

    #[test]
    fn report_rows_and_empty_error() {
        let report = BenchReport {
            results: vec![
                row(Scenario::Masking, 2, 32, 1.0),
                row(Scenario::Masking, 2, 64, 2.0),
                row(Scenario::Keygen, 2, 32, 0.1),
                row(Scenario::Keygen, 2, 64, 0.1),
            ],
            threads: 1,
            modulus_bits: 512,
        };
        let mut buf = Vec::new();
        let summary = emit_report(&report, params(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().next().unwrap(), "scenario,m,d,param_count,repeats,mean,stddev,unit");
        assert!(summary.contains("trend checks: ok"));

        let empty = BenchReport {
            results: vec![],
            ..report
        };
        assert!(matches!(emit_report(&empty, params(), Vec::new()), Err(BenchError::NoResults)));
    }

    #[test]
    fn trend_checks_flag_drops_beyond_tolerance() {
        let ok = [row(Scenario::Masking, 2, 32, 1.0), row(Scenario::Masking, 2, 64, 0.95)];
        assert!(trend_violations(&ok, params(), 0.1).is_empty());
        let bad = [row(Scenario::Masking, 2, 32, 1.0), row(Scenario::Masking, 2, 64, 0.5)];
        assert_eq!(trend_violations(&bad, params(), 0.1).len(), 1);
        let keygen = [row(Scenario::Keygen, 2, 32, 1.0), row(Scenario::Keygen, 5, 32, 0.2)];
        assert_eq!(trend_violations(&keygen, params(), 0.1).len(), 1);
        let mut size = row(Scenario::CommSize, 2, 32, 0.0);
        size.mean = (24 + 4768 * 128 + 1) as f64;
        assert_eq!(trend_violations(&[size], params(), 0.1).len(), 1);
    }
}
