//! Benchmark harness CLI: sweeps batch sizes against a running target and
//! writes per-run and summary data files.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use matrt::bench::{run_experiment, ExperimentConfig};
use matrt_core::schema::parse_schema;

#[derive(Parser)]
#[command(name = "bench", about = "Insertion-rate and response-time benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the batch-size sweep against a target.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Program schema the target is expected to serve (JSON).
    #[arg(long)]
    schema: PathBuf,
    /// Target endpoint.
    #[arg(long)]
    endpoint: String,
    /// Entries inserted per run.
    #[arg(long, default_value_t = 30_000)]
    entries: u32,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_values_t = matrt::bench::default_batch_sizes())]
    batch_sizes: Vec<u32>,
    /// Runs per batch size.
    #[arg(long, default_value_t = 100)]
    runs: u32,
    /// Overall significance level for the confidence intervals.
    #[arg(long, default_value_t = 0.01)]
    significance: f64,
    /// Injected per-request latency in milliseconds (0 = local control).
    #[arg(long, default_value_t = 0.0)]
    delay_ms: f64,
    /// Workload seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for runs.csv, summary.csv, metadata.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    let Cli { command: Command::Run(args) } = Cli::parse();

    let document = std::fs::read_to_string(&args.schema)
        .with_context(|| format!("cannot read schema file {}", args.schema.display()))?;
    let expected = parse_schema(&document).context("cannot load schema")?;

    // Fail early if the target serves a schema other than the given one.
    let served = matrt::client::Session::connect(&args.endpoint, Some(&expected.program_name))
        .context("target handshake failed")?
        .schema()
        .schema_digest;
    anyhow::ensure!(
        served == expected.schema_digest,
        "target serves program {:?} with digest {served:#018x}, but {} has digest {:#018x}",
        expected.program_name,
        args.schema.display(),
        expected.schema_digest
    );

    let config = ExperimentConfig {
        total_entries: args.entries,
        batch_sizes: args.batch_sizes,
        runs: args.runs,
        overall_significance: args.significance,
        response_delay_ms: args.delay_ms,
        rng_seed: args.seed,
    };
    let output = run_experiment(
        &config,
        &args.endpoint,
        Some(&expected.program_name),
        Some(&args.out),
    )?;

    println!(
        "{:>10} {:>14} {:>14} {:>14} {:>14} {:>6}",
        "batch", "rate [1/s]", "rate ±", "resp [s]", "resp ±", "runs"
    );
    let na = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
    for r in &output.records {
        println!(
            "{:>10} {:>14.1} {:>14} {:>14.6} {:>14} {:>6}",
            r.batch_size,
            r.mean_insertion_rate,
            na(r.ci_halfwidth_rate),
            r.mean_response_time,
            na(r.ci_halfwidth_rt),
            r.runs_used
        );
    }
    let tight = output
        .records
        .iter()
        .map(|r| r.halfwidths_below_1pct())
        .collect::<Option<Vec<bool>>>()
        .map(|v| v.into_iter().all(|b| b));
    match tight {
        Some(true) => println!("all confidence half-widths are below 1% of their means"),
        Some(false) => println!("some confidence half-widths exceed 1% of their means"),
        None => println!("confidence half-widths not computable (fewer than 2 runs)"),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
