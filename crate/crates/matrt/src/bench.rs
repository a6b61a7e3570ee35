//! Benchmark harness: sweeps batch sizes against a target, measuring
//! insertion rate and request response time with confidence intervals.
//!
//! The measurement loop inserts a fixed workload of unique entries, one
//! batch per request, waiting for each acknowledgment before sending the
//! next batch. The cumulative time from the creation of the first request
//! to the response of the last one yields both metrics: rate = entries /
//! cumulative, response time = cumulative / request count. Per-request
//! timings are logged alongside for alternative analyses. Remote-control
//! transports are emulated by injecting latency into the session rather
//! than requiring a specially configured target.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use matrt_core::schema::{MatchKind, TableKind, TableSchema};
use matrt_core::value;
use matrt_core::wire::{
    ActionData, ActionParam, FieldMatch, MatchKey, MatchValue, StatusCode, TableUpdate, UpdateOp,
    WriteBatch,
};

use crate::client::{ClientError, ConnectOptions, Session};
use crate::stats::{self, StatsError};

/// Benchmark failure.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("workload does not fit the table: {0}")]
    Workload(String),
    #[error("cumulative time must be positive")]
    ZeroDuration,
    #[error("run failed (batch size {batch_size}, run {run}): {reason}")]
    RunFailed { batch_size: u32, run: u32, reason: String },
    #[error("table clear failed: {0}")]
    ClearFailed(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("cannot write output files: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of one experiment sweep.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    /// Entries inserted per run.
    pub total_entries: u32,
    /// Batch sizes to sweep, each ≤ `total_entries`.
    pub batch_sizes: Vec<u32>,
    /// Measured repetitions per batch size.
    pub runs: u32,
    /// Overall significance level, split across the batch sizes by
    /// Bonferroni correction.
    pub overall_significance: f64,
    /// Injected per-request latency in milliseconds; 0 emulates a local
    /// controller, larger values a remote one.
    pub response_delay_ms: f64,
    /// Workload generator seed.
    pub rng_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            total_entries: 30_000,
            batch_sizes: default_batch_sizes(),
            runs: 100,
            overall_significance: 0.01,
            response_delay_ms: 0.0,
            rng_seed: 0,
        }
    }
}

/// The standard sweep: {a·10^i | a ∈ {1,3}, i ∈ 0..=4}.
pub fn default_batch_sizes() -> Vec<u32> {
    vec![1, 3, 10, 30, 100, 300, 1000, 3000, 10_000, 30_000]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.total_entries == 0 {
            return Err(BenchError::Config("total_entries must be positive".into()));
        }
        if self.batch_sizes.is_empty() {
            return Err(BenchError::Config("at least one batch size is required".into()));
        }
        for (i, &bs) in self.batch_sizes.iter().enumerate() {
            if bs == 0 {
                return Err(BenchError::Config("batch sizes must be positive".into()));
            }
            if bs > self.total_entries {
                return Err(BenchError::Config(format!(
                    "batch size {bs} exceeds total_entries {}",
                    self.total_entries
                )));
            }
            if self.batch_sizes[..i].contains(&bs) {
                return Err(BenchError::Config(format!("duplicate batch size {bs}")));
            }
        }
        if self.runs == 0 {
            return Err(BenchError::Config("runs must be positive".into()));
        }
        let sig = self.overall_significance;
        if !sig.is_finite() || sig <= 0.0 || sig >= 1.0 {
            return Err(BenchError::Config(
                "overall_significance must lie strictly between 0 and 1".into(),
            ));
        }
        if !self.response_delay_ms.is_finite() || self.response_delay_ms < 0.0 {
            return Err(BenchError::Config("response_delay_ms must be non-negative".into()));
        }
        Ok(())
    }

    pub fn response_delay(&self) -> Duration {
        Duration::from_secs_f64(self.response_delay_ms / 1000.0)
    }
}

/// One measured run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub batch_size: u32,
    pub run: u32,
    pub cumulative_seconds: f64,
    pub insertion_rate: f64,
    pub response_time_seconds: f64,
}

/// Aggregates for one batch size. Confidence half-widths are absent when
/// fewer than two runs were measured.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub batch_size: u32,
    pub mean_insertion_rate: f64,
    pub ci_halfwidth_rate: Option<f64>,
    pub mean_response_time: f64,
    pub ci_halfwidth_rt: Option<f64>,
    pub runs_used: u32,
}

impl BenchRecord {
    /// Whether both half-widths fall below 1% of their means, the usual
    /// bar for omitting interval bars from plots. `None` when half-widths
    /// could not be computed.
    pub fn halfwidths_below_1pct(&self) -> Option<bool> {
        let (rate, rt) = (self.ci_halfwidth_rate?, self.ci_halfwidth_rt?);
        Some(
            rate < 0.01 * self.mean_insertion_rate && rt < 0.01 * self.mean_response_time,
        )
    }
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<BenchRecord>,
    pub runs: Vec<RunRecord>,
    pub per_test_alpha: f64,
}

/// Entries inserted per second.
pub fn insertion_rate(entries: u64, cumulative_seconds: f64) -> Result<f64, BenchError> {
    if !cumulative_seconds.is_finite() || cumulative_seconds <= 0.0 {
        return Err(BenchError::ZeroDuration);
    }
    Ok(entries as f64 / cumulative_seconds)
}

/// Seconds per request, derived from the cumulative time and the number
/// of requests the batch size implies: ⌈entries / batch_size⌉.
pub fn response_time(
    entries: u64,
    batch_size: u64,
    cumulative_seconds: f64,
) -> Result<f64, BenchError> {
    if !cumulative_seconds.is_finite() || cumulative_seconds <= 0.0 {
        return Err(BenchError::ZeroDuration);
    }
    if batch_size == 0 {
        return Err(BenchError::Config("batch size must be positive".into()));
    }
    let requests = entries.div_ceil(batch_size);
    if requests == 0 {
        return Err(BenchError::Config("no requests to average over".into()));
    }
    Ok(cumulative_seconds / requests as f64)
}

/// Picks the table the workload targets: the first match-action table
/// whose key is entirely exact-matched.
pub fn workload_table(schema: &matrt_core::schema::ProgramSchema) -> Result<&TableSchema, BenchError> {
    schema
        .tables
        .iter()
        .find(|t| {
            t.kind == TableKind::MatchAction
                && !t.actions.is_empty()
                && t.key_fields.iter().all(|f| f.match_kind == Some(MatchKind::Exact))
        })
        .ok_or_else(|| {
            BenchError::Workload(
                "schema has no exact-match match-action table to benchmark".into(),
            )
        })
}

/// Generates `n` insert updates with pairwise-distinct canonical keys,
/// deterministically for a given seed.
pub fn generate_workload(
    table: &TableSchema,
    n: u32,
    seed: u64,
) -> Result<Vec<TableUpdate>, BenchError> {
    if u64::from(n) > table.capacity {
        return Err(BenchError::Workload(format!(
            "{n} entries exceed the table capacity {}",
            table.capacity
        )));
    }
    if table.actions.is_empty() {
        return Err(BenchError::Workload("table has no actions".into()));
    }
    for f in &table.key_fields {
        if f.match_kind != Some(MatchKind::Exact) {
            return Err(BenchError::Workload(format!(
                "key field {:?} is not exact-matched",
                f.name
            )));
        }
    }
    let key_bits: u32 = table.key_fields.iter().map(|f| u32::from(f.bit_width)).sum();
    if key_bits < 64 && u64::from(n) > 1u64 << key_bits {
        return Err(BenchError::Workload(format!(
            "{n} unique keys cannot exist in a {key_bits}-bit key space"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let action = &table.actions[0];
    let mut seen = std::collections::HashSet::with_capacity(n as usize);
    let mut out = Vec::with_capacity(n as usize);
    while out.len() < n as usize {
        let fields: Vec<FieldMatch> = table
            .key_fields
            .iter()
            .map(|spec| FieldMatch {
                field_id: spec.field_id,
                value: MatchValue::Exact { value: random_value(&mut rng, spec.bit_width) },
            })
            .collect();
        let key = MatchKey { fields, priority: 0 };
        if !seen.insert(key.clone()) {
            continue;
        }
        let params: Vec<ActionParam> = action
            .params
            .iter()
            .map(|p| ActionParam {
                param_id: p.field_id,
                value: random_value(&mut rng, p.bit_width),
            })
            .collect();
        out.push(TableUpdate {
            op: UpdateOp::Insert,
            table_id: table.table_id,
            key,
            action: Some(ActionData { action_id: action.action_id, params }),
        });
    }
    Ok(out)
}

fn random_value(rng: &mut ChaCha12Rng, bits: u16) -> Vec<u8> {
    let mask = if bits >= 128 { u128::MAX } else { (1u128 << bits) - 1 };
    value::u128_to_be(rng.random::<u128>() & mask, value::width_bytes(bits))
}

/// Inserts the whole workload with the given batch size and returns the
/// cumulative time in seconds: creation of the first request to the
/// response of the last. The target table must be empty beforehand; the
/// entry count is verified by reading the table back.
pub fn run_once(
    session: &Session,
    workload: &[TableUpdate],
    batch_size: u32,
) -> Result<f64, BenchError> {
    if workload.is_empty() {
        return Err(BenchError::Workload("empty workload".into()));
    }
    let reports = session.insert_all(workload, batch_size as usize)?;
    for (i, timed) in reports.iter().enumerate() {
        if !timed.report.all_ok() {
            let detail = timed
                .report
                .per_op
                .iter()
                .enumerate()
                .find(|(_, s)| !s.status.is_ok())
                .map(|(j, s)| format!("op {} in batch {i}: {}", j, s.status))
                .unwrap_or_else(|| "unknown".into());
            return Err(BenchError::RunFailed {
                batch_size,
                run: 0,
                reason: format!("non-ok status ({detail})"),
            });
        }
    }
    let cumulative = reports
        .last()
        .unwrap()
        .received_at
        .duration_since(reports.first().unwrap().created_at)
        .as_secs_f64();

    let table_id = workload[0].table_id;
    let table_name = session
        .schema()
        .table_by_id(table_id)
        .map(|t| t.name.clone())
        .ok_or_else(|| BenchError::Workload(format!("workload table {table_id} not served")))?;
    let present = session.read(&table_name, None)?.len();
    if present != workload.len() {
        return Err(BenchError::RunFailed {
            batch_size,
            run: 0,
            reason: format!("read back {present} entries, expected {}", workload.len()),
        });
    }
    Ok(cumulative)
}

/// Empties the workload table with one bulk delete batch.
pub fn clear_table(session: &Session, table: &str) -> Result<(), BenchError> {
    let existing = session.read(table, None)?;
    if existing.is_empty() {
        return Ok(());
    }
    let deletes: Vec<TableUpdate> = existing
        .into_iter()
        .map(|e| TableUpdate {
            op: UpdateOp::Delete,
            table_id: e.table_id,
            key: e.key,
            action: None,
        })
        .collect();
    let timed = session.write(WriteBatch { atomic: false, updates: deletes })?;
    if !timed.report.all_ok() {
        let bad = timed
            .report
            .per_op
            .iter()
            .find(|s| !s.status.is_ok())
            .map(|s| s.status)
            .unwrap_or(StatusCode::Malformed);
        return Err(BenchError::ClearFailed(format!("delete returned {bad}")));
    }
    Ok(())
}

/// Runs the full sweep against `endpoint` and, when `out_dir` is given,
/// writes `runs.csv`, `summary.csv`, and `metadata.json` there.
pub fn run_experiment(
    config: &ExperimentConfig,
    endpoint: &str,
    expected_program: Option<&str>,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput, BenchError> {
    config.validate()?;
    let session = Session::connect_with(
        endpoint,
        ConnectOptions {
            expected_program: expected_program.map(str::to_string),
            injected_latency: config.response_delay(),
            ..ConnectOptions::default()
        },
    )?;
    let table = workload_table(session.schema())?.clone();
    let workload = generate_workload(&table, config.total_entries, config.rng_seed)?;
    let per_test_alpha = config.overall_significance / config.batch_sizes.len() as f64;

    // Rounds interleave the batch sizes so slow machine-level drift
    // (cache warmth, host load) spreads evenly instead of aliasing onto
    // whichever size happens to run last; alternating the direction per
    // round cancels drift within a round as well.
    let mut runs = Vec::with_capacity(config.batch_sizes.len() * config.runs as usize);
    for run in 0..config.runs {
        let mut round: Vec<u32> = config.batch_sizes.clone();
        if run % 2 == 1 {
            round.reverse();
        }
        for batch_size in round {
            clear_table(&session, &table.name)?;
            let cumulative = match run_once(&session, &workload, batch_size) {
                Ok(c) => c,
                Err(BenchError::RunFailed { reason, .. }) => {
                    return Err(BenchError::RunFailed { batch_size, run, reason })
                }
                Err(e) => return Err(e),
            };
            let rate = insertion_rate(u64::from(config.total_entries), cumulative)?;
            let rt = response_time(
                u64::from(config.total_entries),
                u64::from(batch_size),
                cumulative,
            )?;
            runs.push(RunRecord {
                batch_size,
                run,
                cumulative_seconds: cumulative,
                insertion_rate: rate,
                response_time_seconds: rt,
            });
        }
    }
    // Records and files are emitted grouped by batch size in sweep order.
    let order: std::collections::HashMap<u32, usize> =
        config.batch_sizes.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    runs.sort_by_key(|r| (order[&r.batch_size], r.run));

    let mut records = Vec::with_capacity(config.batch_sizes.len());
    for &batch_size in &config.batch_sizes {
        let rates: Vec<f64> = runs
            .iter()
            .filter(|r| r.batch_size == batch_size)
            .map(|r| r.insertion_rate)
            .collect();
        let rts: Vec<f64> = runs
            .iter()
            .filter(|r| r.batch_size == batch_size)
            .map(|r| r.response_time_seconds)
            .collect();
        let (mean_rate, hw_rate) = aggregate(&rates, per_test_alpha)?;
        let (mean_rt, hw_rt) = aggregate(&rts, per_test_alpha)?;
        records.push(BenchRecord {
            batch_size,
            mean_insertion_rate: mean_rate,
            ci_halfwidth_rate: hw_rate,
            mean_response_time: mean_rt,
            ci_halfwidth_rt: hw_rt,
            runs_used: config.runs,
        });
    }

    let output = ExperimentOutput { records, runs, per_test_alpha };
    if let Some(dir) = out_dir {
        write_outputs(dir, config, &output)?;
    }
    Ok(output)
}

fn aggregate(samples: &[f64], alpha: f64) -> Result<(f64, Option<f64>), BenchError> {
    if samples.len() < 2 {
        return Ok((samples[0], None));
    }
    let ci = stats::confidence_interval(samples, alpha)?;
    Ok((ci.mean, Some(ci.halfwidth)))
}

/// Writes the per-run CSV, the summary CSV, and the metadata JSON.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    output: &ExperimentOutput,
) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;

    let mut runs = std::fs::File::create(dir.join("runs.csv"))?;
    writeln!(runs, "batch_size,run,cumulative_seconds,insertion_rate,response_time_seconds")?;
    for r in &output.runs {
        writeln!(
            runs,
            "{},{},{},{},{}",
            r.batch_size, r.run, r.cumulative_seconds, r.insertion_rate, r.response_time_seconds
        )?;
    }

    let mut summary = std::fs::File::create(dir.join("summary.csv"))?;
    writeln!(summary, "batch_size,mean_rate,rate_ci_halfwidth,mean_rt,rt_ci_halfwidth,runs")?;
    let na = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
    for r in &output.records {
        writeln!(
            summary,
            "{},{},{},{},{},{}",
            r.batch_size,
            r.mean_insertion_rate,
            na(r.ci_halfwidth_rate),
            r.mean_response_time,
            na(r.ci_halfwidth_rt),
            r.runs_used
        )?;
    }

    #[derive(Serialize)]
    struct RecordMeta {
        batch_size: u32,
        halfwidths_below_1pct_of_mean: Option<bool>,
    }
    #[derive(Serialize)]
    struct Metadata<'a> {
        config: &'a ExperimentConfig,
        correction: &'static str,
        per_test_alpha: f64,
        interval_quality: Vec<RecordMeta>,
        environment: Environment,
    }
    #[derive(Serialize)]
    struct Environment {
        os: &'static str,
        arch: &'static str,
    }
    let metadata = Metadata {
        config,
        correction: "bonferroni",
        per_test_alpha: output.per_test_alpha,
        interval_quality: output
            .records
            .iter()
            .map(|r| RecordMeta {
                batch_size: r.batch_size,
                halfwidths_below_1pct_of_mean: r.halfwidths_below_1pct(),
            })
            .collect(),
        environment: Environment {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        },
    };
    let file = std::fs::File::create(dir.join("metadata.json"))?;
    serde_json::to_writer_pretty(file, &metadata).map_err(std::io::Error::other)?;
    Ok(())
}
