//! Seeds x variations over a base scenario.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{bail, Context, Result};
use hybrid_bft::checker;
use hybrid_bft::netsim::{self, SimError};
use hybrid_bft::scenario::AdversaryMode;
use hybrid_bft::{CheckKind, ScenarioConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_adversary, parse_checks, write_json, ScenarioArgs};

#[derive(clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Seeds: `a..b`, `a..=b`, or a comma-separated list
    #[arg(long, value_parser = parse_seeds)]
    seeds: Vec<Vec<u64>>,
    /// Adversary modes to vary over
    #[arg(long = "vary-adversary", value_delimiter = ',', value_parser = parse_adversary)]
    adversaries: Vec<AdversaryMode>,
    /// Fast-path settings to vary over
    #[arg(long = "vary-fast-path", value_delimiter = ',')]
    fast_paths: Vec<bool>,
    /// Block payload sizes in bytes to vary over
    #[arg(long = "vary-block-size", value_delimiter = ',')]
    block_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    /// Aggregate report path
    #[arg(long, default_value = "sweep.json")]
    out: PathBuf,
    /// Where replay configs of failing runs go; defaults next to the report
    #[arg(long, value_name = "DIR")]
    failures_dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs
    #[arg(long)]
    jobs: Option<usize>,
    /// Stop scheduling new runs after the first failure
    #[arg(long)]
    fail_fast: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("bad seed {t:?}"));
    let seeds = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    Ok(seeds)
}

#[derive(Debug, Clone, Serialize)]
struct Variation {
    adversary: AdversaryMode,
    fast_path: bool,
    block_payload_size: usize,
}

#[derive(Debug, Serialize)]
struct RunRecord {
    index: usize,
    seed: u64,
    #[serde(flatten)]
    variation: Variation,
    byzantine: Vec<u32>,
    passed: bool,
    failed_checks: Vec<CheckKind>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    committed_blocks: u64,
    latency_mean_ms: Option<f64>,
    end_time_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    replay: Option<String>,
}

#[derive(Debug, Default, Serialize)]
struct CheckTally {
    passed: usize,
    failed: usize,
}

#[derive(Debug, Serialize)]
struct Group {
    #[serde(flatten)]
    variation: Variation,
    runs: usize,
    passed: usize,
    /// Mean over runs of each run's mean leader commit latency.
    latency_mean_ms: Option<f64>,
    committed_blocks_mean: f64,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    base: ScenarioConfig,
    checks: Vec<CheckKind>,
    planned: usize,
    runs: usize,
    passed: usize,
    failed: usize,
    skipped: usize,
    per_check: BTreeMap<CheckKind, CheckTally>,
    groups: Vec<Group>,
    records: Vec<RunRecord>,
}

/// Byzantine ids used when an adversarial run names none.
fn default_byzantine(seed: u64, n: usize, f: usize) -> Vec<u32> {
    (0..f as u64).map(|i| ((seed + 2 * i) % n as u64) as u32).collect()
}

fn or_base<T: Copy>(v: &[T], base: T) -> Vec<T> {
    if v.is_empty() {
        vec![base]
    } else {
        v.to_vec()
    }
}

fn variations(a: &SweepArgs, base: &ScenarioConfig) -> Vec<Variation> {
    let advs = or_base(&a.adversaries, base.adversary);
    let fasts = or_base(&a.fast_paths, base.fast_path);
    let sizes = or_base(&a.block_sizes, base.block_payload_size);
    let mut out = Vec::new();
    for &adversary in &advs {
        for &fast_path in &fasts {
            for &block_payload_size in &sizes {
                out.push(Variation { adversary, fast_path, block_payload_size });
            }
        }
    }
    out
}

fn run_one(index: usize, cfg: &ScenarioConfig, var: &Variation, checks: &[CheckKind]) -> RunRecord {
    let mut rec = RunRecord {
        index,
        seed: cfg.seed,
        variation: var.clone(),
        byzantine: cfg.byzantine.clone(),
        passed: false,
        failed_checks: Vec::new(),
        violations: Vec::new(),
        error: None,
        committed_blocks: 0,
        latency_mean_ms: None,
        end_time_ms: 0.0,
        replay: None,
    };
    let trace = match netsim::run(cfg) {
        Ok(o) => o.trace,
        Err(SimError::Stalled { replica, epoch, trace }) => {
            rec.error = Some(format!("stalled: replica {replica} stuck in epoch {epoch:?}"));
            *trace
        }
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.end_time_ms = trace.end_time() as f64 / 1000.0;
    match checker::run_checks(&trace, checks).and_then(|r| Ok((r, checker::metrics(&trace)?))) {
        Ok((report, metrics)) => {
            for v in report.verdicts.iter().filter(|v| !v.passed) {
                rec.failed_checks.push(v.check);
                if let Some(x) = v.first() {
                    rec.violations.push(format!("{}: {x}", v.check));
                }
            }
            rec.committed_blocks = metrics.committed_blocks;
            rec.latency_mean_ms = metrics.latency.mean_ms;
            rec.passed = report.passed() && rec.error.is_none();
        }
        Err(e) => rec.error = Some(format!("checking trace: {e}")),
    }
    rec
}

pub fn sweep(a: SweepArgs) -> Result<bool> {
    let (base, out) = a.scenario.resolve()?;
    let seeds: Vec<u64> = a.seeds.iter().flatten().copied().collect();
    if seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    let checks = parse_checks(&a.checks.clone().or(out.checks).unwrap_or_default())?;
    let vars = variations(&a, &base);

    let mut jobs = Vec::new();
    for &seed in &seeds {
        for v in &vars {
            let mut c = ScenarioConfig {
                seed,
                adversary: v.adversary,
                fast_path: v.fast_path,
                block_payload_size: v.block_payload_size,
                ..base.clone()
            };
            if c.adversary != AdversaryMode::None && c.byzantine.is_empty() {
                c.byzantine = default_byzantine(seed, c.n, c.f);
            }
            c.validate().with_context(|| format!("variation {v:?} with seed {seed}"))?;
            jobs.push((jobs.len(), c, v.clone()));
        }
    }
    let planned = jobs.len();
    println!("sweep: {} seeds x {} variations = {planned} runs", seeds.len(), vars.len());

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = a.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().context("building worker pool")?;
    let stop = AtomicBool::new(false);
    let mut records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .filter_map(|(i, c, v)| {
                if a.fail_fast && stop.load(Ordering::Relaxed) {
                    return None;
                }
                let rec = run_one(*i, c, v, &checks);
                if !rec.passed {
                    stop.store(true, Ordering::Relaxed);
                }
                Some(rec)
            })
            .collect()
    });
    records.sort_by_key(|r| r.index);

    let failures_dir = a.failures_dir.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sweep".into());
        a.out.with_file_name(format!("{stem}-failures"))
    });
    for rec in records.iter_mut().filter(|r| !r.passed) {
        let cfg = &jobs[rec.index].1;
        std::fs::create_dir_all(&failures_dir).with_context(|| format!("creating {}", failures_dir.display()))?;
        let path = failures_dir.join(format!("run-{}-seed-{}.toml", rec.index, rec.seed));
        std::fs::write(&path, cfg.to_toml_string()).with_context(|| format!("writing {}", path.display()))?;
        rec.replay = Some(format!("hybrid-bft run --config {}", path.display()));
    }

    let mut per_check: BTreeMap<CheckKind, CheckTally> = checks.iter().map(|&k| (k, CheckTally::default())).collect();
    for r in &records {
        for (k, t) in per_check.iter_mut() {
            if r.failed_checks.contains(k) {
                t.failed += 1;
            } else {
                t.passed += 1;
            }
        }
    }
    let groups = vars
        .iter()
        .map(|v| {
            let rs: Vec<&RunRecord> = records
                .iter()
                .filter(|r| {
                    r.variation.adversary == v.adversary
                        && r.variation.fast_path == v.fast_path
                        && r.variation.block_payload_size == v.block_payload_size
                })
                .collect();
            let lats: Vec<f64> = rs.iter().filter_map(|r| r.latency_mean_ms).collect();
            Group {
                variation: v.clone(),
                runs: rs.len(),
                passed: rs.iter().filter(|r| r.passed).count(),
                latency_mean_ms: (!lats.is_empty()).then(|| lats.iter().sum::<f64>() / lats.len() as f64),
                committed_blocks_mean: if rs.is_empty() {
                    0.0
                } else {
                    rs.iter().map(|r| r.committed_blocks as f64).sum::<f64>() / rs.len() as f64
                },
            }
        })
        .collect::<Vec<_>>();

    let passed = records.iter().filter(|r| r.passed).count();
    let agg = Aggregate {
        base,
        checks,
        planned,
        runs: records.len(),
        passed,
        failed: records.len() - passed,
        skipped: planned - records.len(),
        per_check,
        groups,
        records,
    };
    write_json(&a.out, &agg)?;

    for g in &agg.groups {
        let lat = g.latency_mean_ms.map_or("-".to_string(), |l| format!("{l:.3} ms"));
        println!(
            "  adversary={:<13} fast_path={:<5} payload={:>8}B  {}/{} passed  latency {lat}",
            g.variation.adversary.name(),
            g.variation.fast_path,
            g.variation.block_payload_size,
            g.passed,
            g.runs
        );
    }
    for r in agg.records.iter().filter(|r| !r.passed) {
        let why = r.error.clone().unwrap_or_else(|| r.violations.join("; "));
        println!("FAIL run {} seed {}: {why}", r.index, r.seed);
        if let Some(cmd) = &r.replay {
            println!("  replay: {cmd}");
        }
    }
    if agg.skipped > 0 {
        println!("stopped early: {} runs skipped", agg.skipped);
    }
    println!("{}/{} runs passed; report in {}", agg.passed, agg.runs, a.out.display());
    Ok(agg.failed == 0 && agg.skipped == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("2..5").unwrap(), [2, 3, 4]);
        assert_eq!(parse_seeds("2..=4").unwrap(), [2, 3, 4]);
        assert_eq!(parse_seeds("9, 1").unwrap(), [9, 1]);
        assert!(parse_seeds("a..3").is_err());
        assert!(parse_seeds("5..5").unwrap().is_empty());
    }

    #[test]
    fn default_byzantine_ids_are_distinct() {
        for n in 3..12 {
            let f = (n - 1) / 2;
            for seed in 0..20 {
                let mut ids = default_byzantine(seed, n, f);
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), f);
            }
        }
    }
}
