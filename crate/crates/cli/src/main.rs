mod config;
mod sweep;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hybrid_bft::checker::{self, CheckReport};
use hybrid_bft::latmodel::{DEFAULT_DRAWS, DEFAULT_FRAGMENTS};
use hybrid_bft::netsim::{self, SimError};
use hybrid_bft::{SampleSet, ScenarioConfig, Trace};

use config::{parse_checks, write_json, ScenarioArgs};

#[derive(Parser)]
#[command(name = "hybrid-bft", version, about = "Simulate, sweep and check the hybrid-synchrony BFT protocol")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario, write its trace and metrics, run checks
    Run(RunArgs),
    /// Run seeds x variations of a base scenario and write an aggregate report
    Sweep(sweep::SweepArgs),
    /// Derive delta_s and delta_l from measured delay samples
    Bounds(BoundsArgs),
    /// Re-run checks on a saved trace
    Check(CheckArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Directory for trace.ndjson, metrics.json and verdicts.json
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    verdicts: Option<PathBuf>,
    /// Comma-separated check names, or "all"
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    /// Print the resolved config and exit
    #[arg(long)]
    dry_run: bool,
}

#[derive(clap::Args)]
struct BoundsArgs {
    /// File with one delay in ms per line
    samples: PathBuf,
    /// Fragments per large message
    #[arg(short, default_value_t = DEFAULT_FRAGMENTS)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the bounds record; `.toml` extension gives TOML, anything else JSON
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CheckArgs {
    trace: PathBuf,
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    #[arg(long, value_name = "PATH")]
    verdicts: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep::sweep(a),
        Command::Bounds(a) => bounds(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", chain(&e).trim_end());
            ExitCode::from(2)
        }
    }
}

/// Error chain joined with ": ", skipping causes their parent already prints.
fn chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.ends_with(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn describe(c: &ScenarioConfig) -> String {
    format!(
        "n={} f={} byzantine={:?} adversary={} fast_path={} delta_s={}ms delta_l={}ms gst={} epochs={} payload={}B seed={}",
        c.n,
        c.f,
        c.byzantine,
        c.adversary.name(),
        c.fast_path,
        c.delta_s,
        c.delta_l,
        c.gst,
        c.epochs,
        c.block_payload_size,
        c.seed
    )
}

fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    trace.write_ndjson(BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))
}

fn print_report(report: &CheckReport) {
    for v in &report.verdicts {
        println!("  {v}");
        for x in v.violations.iter().take(3) {
            println!("      {x}");
        }
    }
}

fn run(a: RunArgs) -> Result<bool> {
    let (cfg, out) = a.scenario.resolve()?;
    if a.dry_run {
        print!("{}", cfg.to_toml_string());
        return Ok(true);
    }
    let checks = parse_checks(&a.checks.or(out.checks).unwrap_or_default())?;
    let dir = a.out_dir.or(out.dir).unwrap_or_else(|| PathBuf::from("out"));
    let trace_path = a.trace.or(out.trace).unwrap_or_else(|| dir.join("trace.ndjson"));
    let metrics_path = a.metrics.or(out.metrics).unwrap_or_else(|| dir.join("metrics.json"));
    let verdicts_path = a.verdicts.or(out.verdicts).unwrap_or_else(|| dir.join("verdicts.json"));

    println!("scenario: {}", describe(&cfg));
    let (trace, stall) = match netsim::run(&cfg) {
        Ok(o) => {
            println!(
                "simulated {:.1} ms: {} events, {} messages, {} bytes",
                o.stats.end_time as f64 / 1000.0,
                o.stats.events,
                o.stats.messages,
                o.stats.bytes
            );
            (o.trace, None)
        }
        Err(SimError::Stalled { replica, epoch, trace }) => {
            let msg = format!("simulation stalled: replica {replica} stuck in epoch {epoch:?}");
            (*trace, Some(msg))
        }
        Err(e) => return Err(e).context("simulation failed"),
    };
    write_trace(&trace_path, &trace)?;
    let metrics = checker::metrics(&trace)?;
    write_json(&metrics_path, &metrics)?;
    let report = checker::run_checks(&trace, &checks)?;
    write_json(&verdicts_path, &report)?;

    let lat = &metrics.latency;
    match (lat.mean_ms, lat.p50_ms, lat.p99_ms) {
        (Some(mean), Some(p50), Some(p99)) => println!(
            "committed {} blocks; leader commit latency mean {mean:.3} ms, p50 {p50:.3} ms, p99 {p99:.3} ms ({} samples)",
            metrics.committed_blocks, lat.count
        ),
        _ => println!("committed {} blocks; no leader commit latency samples", metrics.committed_blocks),
    }
    println!("checks:");
    print_report(&report);
    println!("wrote {}, {}, {}", trace_path.display(), metrics_path.display(), verdicts_path.display());
    if let Some(msg) = &stall {
        eprintln!("{msg}");
    }
    Ok(report.passed() && stall.is_none())
}

fn bounds(a: BoundsArgs) -> Result<bool> {
    let set = SampleSet::load(&a.samples)?;
    let b = set.derive_bounds(a.k, a.draws, a.seed)?;
    println!(
        "{} samples from {}: delta_s = {} ms, delta_l = {} ms (k={}, {} draws, seed {})",
        b.samples,
        a.samples.display(),
        b.delta_s,
        b.delta_l,
        b.fragments,
        b.draws,
        b.seed
    );
    if let Some(path) = &a.out {
        if path.extension().is_some_and(|e| e == "toml") {
            let text = toml::to_string(&b)?;
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        } else {
            write_json(path, &b)?;
        }
    }
    Ok(true)
}

fn check(a: CheckArgs) -> Result<bool> {
    let checks = parse_checks(&a.checks.unwrap_or_default())?;
    let f = File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let trace = Trace::read_ndjson(BufReader::new(f)).with_context(|| format!("reading {}", a.trace.display()))?;
    if trace.records.is_empty() {
        bail!("{} holds no records", a.trace.display());
    }
    let report = checker::run_checks(&trace, &checks)?;
    println!("{}:", a.trace.display());
    print_report(&report);
    if let Some(p) = &a.verdicts {
        write_json(p, &report)?;
    }
    Ok(report.passed())
}
