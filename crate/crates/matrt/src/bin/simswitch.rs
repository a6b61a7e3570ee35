//! Simulated switch target: serves a program schema over TCP and applies
//! runtime configuration from connected controllers.

use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use matrt::target::{serve, TargetConfig};
use matrt_core::schema::parse_schema;

#[derive(Parser)]
#[command(name = "simswitch", about = "Simulated match-action switch target")]
struct Args {
    /// Path to the program schema (JSON).
    #[arg(long)]
    schema: std::path::PathBuf,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:9173")]
    listen: String,
    /// Injected latency per request, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    response_delay_ms: f64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let document = std::fs::read_to_string(&args.schema)
        .with_context(|| format!("cannot read schema file {}", args.schema.display()))?;
    let schema = parse_schema(&document).context("cannot load schema")?;
    anyhow::ensure!(args.response_delay_ms >= 0.0, "response delay must be non-negative");

    let config = TargetConfig {
        response_delay: Duration::from_secs_f64(args.response_delay_ms / 1000.0),
    };
    let program = schema.program_name.clone();
    let tables = schema.tables.len();
    let digest = schema.schema_digest;
    let handle = serve(schema, &args.listen, config)
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    println!(
        "serving program {program:?} ({tables} table(s), digest {digest:#018x}) on {}",
        handle.local_addr()
    );

    // Serve until killed.
    loop {
        std::thread::park();
    }
}
