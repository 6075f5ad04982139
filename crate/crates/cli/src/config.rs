//! Config files plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use hybrid_bft::scenario::{self, AdversaryMode, Gst};
use hybrid_bft::{CheckKind, ScenarioConfig, SchemeKind};
use serde::Deserialize;

/// `[output]` table accepted next to the scenario fields.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub verdicts: Option<PathBuf>,
    pub checks: Option<Vec<String>>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ScenarioArgs {
    /// TOML config file; repeat to layer files, later ones win
    #[arg(short, long = "config", value_name = "PATH")]
    pub configs: Vec<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub f: Option<usize>,
    /// Comma-separated Byzantine replica ids
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub byzantine: Option<Vec<u32>>,
    #[arg(long, value_parser = parse_adversary)]
    pub adversary: Option<AdversaryMode>,
    #[arg(long, value_name = "MS")]
    pub crash_at_ms: Option<f64>,
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long, value_name = "MS")]
    pub vote_delay_ms: Option<f64>,
    /// Small-message bound in ms
    #[arg(long, value_name = "MS")]
    pub delta_s: Option<f64>,
    /// Large-message bound in ms
    #[arg(long, value_name = "MS")]
    pub delta_l: Option<f64>,
    /// GST in ms, or "never"
    #[arg(long, value_parser = parse_gst)]
    pub gst: Option<Gst>,
    #[arg(long, value_name = "MS")]
    pub start_stagger: Option<f64>,
    #[arg(long, value_name = "BYTES")]
    pub small_threshold: Option<usize>,
    #[arg(long, value_name = "BYTES")]
    pub block_payload_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub fast_path: Option<bool>,
    #[arg(long, value_parser = parse_scheme)]
    pub signature_scheme: Option<SchemeKind>,
    #[arg(long, value_name = "MS")]
    pub horizon_ms: Option<f64>,
}

pub fn parse_adversary(s: &str) -> Result<AdversaryMode, String> {
    AdversaryMode::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
        let names: Vec<_> = AdversaryMode::ALL.iter().map(|a| a.name()).collect();
        format!("unknown adversary {s:?}, expected one of {}", names.join(", "))
    })
}

fn parse_gst(s: &str) -> Result<Gst, String> {
    if s == "never" {
        return Ok(Gst::NEVER);
    }
    s.parse::<f64>().map(Gst::At).map_err(|_| format!("expected milliseconds or \"never\", got {s:?}"))
}

fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    match s {
        "ed25519" => Ok(SchemeKind::Ed25519),
        "test_mac" => Ok(SchemeKind::TestMac),
        _ => Err(format!("unknown scheme {s:?}, expected ed25519 or test_mac")),
    }
}

pub fn parse_checks(names: &[String]) -> Result<Vec<CheckKind>> {
    if names.is_empty() || names.iter().any(|n| n == "all") {
        return Ok(CheckKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for n in names {
        let Some(k) = CheckKind::parse(n) else {
            let known: Vec<_> = CheckKind::ALL.iter().map(|k| k.name()).collect();
            bail!("unknown check {n:?}, expected one of: all, {}", known.join(", "));
        };
        if !out.contains(&k) {
            out.push(k);
        }
    }
    Ok(out)
}

impl ScenarioArgs {
    /// Merges the config files, splits off `[output]`, applies flag
    /// overrides and validates the result.
    pub fn resolve(&self) -> Result<(ScenarioConfig, OutputConfig)> {
        let mut merged = toml::Table::new();
        for p in &self.configs {
            scenario::merge_tables(&mut merged, scenario::read_table(p)?);
        }
        let output = match merged.remove("output") {
            Some(v) => v.try_into::<OutputConfig>().context("invalid [output] table")?,
            None => OutputConfig::default(),
        };
        let origin = match self.configs.as_slice() {
            [] => "defaults".to_string(),
            [one] => one.display().to_string(),
            _ => "merged config".to_string(),
        };
        let mut cfg = ScenarioConfig::from_table(merged, &origin)?;
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok((cfg, output))
    }

    fn apply(&self, c: &mut ScenarioConfig) {
        macro_rules! set {
            ($($field:ident).+ <- $flag:ident) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(n <- n);
        set!(f <- f);
        set!(byzantine <- byzantine);
        set!(adversary <- adversary);
        set!(adversary_params.crash_at_ms <- crash_at_ms);
        set!(adversary_params.split <- split);
        set!(adversary_params.vote_delay_ms <- vote_delay_ms);
        set!(delta_s <- delta_s);
        set!(delta_l <- delta_l);
        set!(gst <- gst);
        set!(small_threshold <- small_threshold);
        set!(block_payload_size <- block_payload_size);
        set!(epochs <- epochs);
        set!(seed <- seed);
        set!(fast_path <- fast_path);
        set!(signature_scheme <- signature_scheme);
        if self.start_stagger.is_some() {
            c.start_stagger = self.start_stagger;
        }
        if self.horizon_ms.is_some() {
            c.horizon_ms = self.horizon_ms;
        }
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
