//! Scenario configuration. Durations are milliseconds in the file and
//! microseconds inside the simulator.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::SchemeKind;
use crate::replica::ProtocolParams;
use crate::trace::Micros;
use crate::types::{quit_epoch_block_cert_len, ReplicaId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round().max(0.0) as Micros
}

/// When large messages become timely: a time in milliseconds or `"never"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gst {
    At(f64),
    Never(NeverKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeverKeyword {
    Never,
}

impl Gst {
    pub const NEVER: Gst = Gst::Never(NeverKeyword::Never);

    pub fn micros(self) -> Option<Micros> {
        match self {
            Gst::At(ms) => Some(ms_to_us(ms)),
            Gst::Never(_) => None,
        }
    }
}

impl fmt::Display for Gst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gst::At(ms) => write!(f, "{ms}"),
            Gst::Never(_) => f.write_str("never"),
        }
    }
}

/// Delay distribution for one message class. Values are milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayDist {
    Fixed {
        ms: f64,
    },
    Uniform {
        lo_ms: f64,
        hi_ms: f64,
    },
    /// Log-normal with the given shape, scaled so its 99.99th percentile
    /// sits at `p9999_ms` (the class bound when omitted), then truncated at
    /// the class bound.
    LogNormal {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p9999_ms: Option<f64>,
    },
    /// Message is never delivered. Only allowed before GST.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    pub small: DelayDist,
    pub large: DelayDist,
    /// Large-message delays before GST (and from `delay_l` adversaries).
    pub large_pre_gst: DelayDist,
    /// Probability that a small message exceeds its bound. Stress runs only.
    pub small_violation_rate: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            small: DelayDist::LogNormal { sigma: 0.5, p9999_ms: None },
            large: DelayDist::LogNormal { sigma: 0.5, p9999_ms: None },
            large_pre_gst: DelayDist::LogNormal { sigma: 1.0, p9999_ms: None },
            small_violation_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryMode {
    /// Byzantine replicas (if any) follow the protocol.
    #[default]
    None,
    SilentLeader,
    Equivocate,
    Crash,
    DelayL,
}

impl AdversaryMode {
    pub const ALL: [AdversaryMode; 5] = [
        AdversaryMode::None,
        AdversaryMode::SilentLeader,
        AdversaryMode::Equivocate,
        AdversaryMode::Crash,
        AdversaryMode::DelayL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdversaryMode::None => "none",
            AdversaryMode::SilentLeader => "silent_leader",
            AdversaryMode::Equivocate => "equivocate",
            AdversaryMode::Crash => "crash",
            AdversaryMode::DelayL => "delay_l",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryParams {
    /// Crash time for `crash` replicas.
    pub crash_at_ms: f64,
    /// Fraction of honest replicas that receive the first of two
    /// equivocating proposals.
    pub split: f64,
    /// Delay before colluding replicas cast their double votes.
    pub vote_delay_ms: f64,
}

impl Default for AdversaryParams {
    fn default() -> Self {
        Self { crash_at_ms: 0.0, split: 0.5, vote_delay_ms: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub f: usize,
    pub byzantine: Vec<u32>,
    pub adversary: AdversaryMode,
    pub adversary_params: AdversaryParams,
    pub delta_s: f64,
    pub delta_l: f64,
    pub gst: Gst,
    /// Maximum start offset of a replica; defaults to `delta_s`.
    pub start_stagger: Option<f64>,
    pub small_threshold: usize,
    pub block_payload_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub fast_path: bool,
    pub signature_scheme: SchemeKind,
    pub delays: DelayConfig,
    /// Simulated-time cap; derived from the other parameters when omitted.
    pub horizon_ms: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 5,
            f: 2,
            byzantine: Vec::new(),
            adversary: AdversaryMode::None,
            adversary_params: AdversaryParams::default(),
            delta_s: 100.0,
            delta_l: 500.0,
            gst: Gst::At(0.0),
            start_stagger: None,
            small_threshold: 4096,
            block_payload_size: 128 * 1024,
            epochs: 50,
            seed: 0,
            fast_path: false,
            signature_scheme: SchemeKind::Ed25519,
            delays: DelayConfig::default(),
            horizon_ms: None,
        }
    }
}

fn check_dist(field: &'static str, d: &DelayDist, bound: Option<f64>) -> Result<(), ConfigError> {
    let within = |v: f64| bound.is_none_or(|b| v <= b + 1e-9);
    match *d {
        DelayDist::Fixed { ms } => {
            if !(ms > 0.0 && ms.is_finite()) || !within(ms) {
                return Err(invalid(field, format!("fixed delay {ms} must be in (0, {bound:?}]")));
            }
        }
        DelayDist::Uniform { lo_ms, hi_ms } => {
            if !(lo_ms > 0.0 && lo_ms <= hi_ms && hi_ms.is_finite()) || !within(hi_ms) {
                return Err(invalid(
                    field,
                    format!("uniform [{lo_ms}, {hi_ms}] must satisfy 0 < lo <= hi <= {bound:?}"),
                ));
            }
        }
        DelayDist::LogNormal { sigma, p9999_ms } => {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(invalid(field, "sigma must be positive"));
            }
            if let Some(p) = p9999_ms {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(invalid(field, "p9999_ms must be positive"));
                }
            }
        }
        DelayDist::Never => {
            if bound.is_some() {
                return Err(invalid(field, "`never` is only allowed for large_pre_gst"));
            }
        }
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), source: Box::new(e) })?;
        Ok(cfg)
    }

    /// Loads and merges several TOML files, later files overriding earlier
    /// keys. Unknown keys are rejected.
    pub fn load_merged<P: AsRef<Path>>(paths: &[P]) -> Result<Self, ConfigError> {
        let mut merged = toml::Table::new();
        for p in paths {
            merge_tables(&mut merged, read_table(p)?);
        }
        Self::from_table(merged, "merged config")
    }

    pub fn from_table(table: toml::Table, origin: &str) -> Result<Self, ConfigError> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| ConfigError::Parse { path: origin.to_string(), source: Box::new(e) })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(invalid("n", "must be positive"));
        }
        if self.n <= 2 * self.f {
            return Err(invalid("n", format!("need n > 2f, got n={} f={}", self.n, self.f)));
        }
        if self.byzantine.len() > self.f {
            return Err(invalid("byzantine", format!("{} faulty replicas exceed f={}", self.byzantine.len(), self.f)));
        }
        let mut seen = self.byzantine.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.byzantine.len() || seen.iter().any(|&b| b as usize >= self.n) {
            return Err(invalid("byzantine", "ids must be distinct and below n"));
        }
        if !(self.delta_s > 0.0 && self.delta_s.is_finite()) {
            return Err(invalid("delta_s", "must be positive"));
        }
        if !(self.delta_l >= self.delta_s && self.delta_l.is_finite()) {
            return Err(invalid("delta_l", "must be at least delta_s"));
        }
        if let Gst::At(g) = self.gst {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(invalid("gst", "must be non-negative or \"never\""));
            }
        }
        if let Some(s) = self.start_stagger {
            if !(s >= 0.0 && s <= self.delta_s) {
                return Err(invalid("start_stagger", "must lie in [0, delta_s]"));
            }
        }
        let quit_len = quit_epoch_block_cert_len(self.f + 1);
        if quit_len > self.small_threshold {
            return Err(invalid(
                "small_threshold",
                format!("a block certificate message ({quit_len} B) must be small"),
            ));
        }
        if self.block_payload_size < crate::app::CHECKSUM_LEN {
            return Err(invalid("block_payload_size", "must hold the 8-byte checksum"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.adversary_params.split) {
            return Err(invalid("adversary_params.split", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.delays.small_violation_rate) {
            return Err(invalid("delays.small_violation_rate", "must lie in [0, 1]"));
        }
        check_dist("delays.small", &self.delays.small, Some(self.delta_s))?;
        check_dist("delays.large", &self.delays.large, Some(self.delta_l))?;
        check_dist("delays.large_pre_gst", &self.delays.large_pre_gst, None)?;
        if let Some(h) = self.horizon_ms {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("horizon_ms", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn delta_s_us(&self) -> Micros {
        ms_to_us(self.delta_s)
    }

    pub fn delta_l_us(&self) -> Micros {
        ms_to_us(self.delta_l)
    }

    pub fn start_stagger_us(&self) -> Micros {
        ms_to_us(self.start_stagger.unwrap_or(self.delta_s))
    }

    pub fn byzantine_ids(&self) -> Vec<ReplicaId> {
        self.byzantine.iter().map(|&b| ReplicaId(b)).collect()
    }

    pub fn protocol_params(&self) -> ProtocolParams {
        ProtocolParams {
            delta_s: self.delta_s_us(),
            delta_l: self.delta_l_us(),
            fast_path: self.fast_path,
            small_threshold: self.small_threshold,
            last_epoch: Some(self.epochs),
        }
    }

    /// Simulated-time cap: generous enough for every epoch to end through
    /// the silence path even if no large message is ever delivered.
    pub fn horizon_us(&self) -> Micros {
        if let Some(h) = self.horizon_ms {
            return ms_to_us(h);
        }
        let ds = self.delta_s_us();
        let per_epoch = self.delta_l_us() + 8 * ds;
        let base = self.gst.micros().unwrap_or(0);
        base + (self.epochs + 4) * per_epoch * 4 + self.start_stagger_us()
    }
}

pub fn read_table(path: impl AsRef<Path>) -> Result<toml::Table, ConfigError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: shown.clone(), source })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: shown, source: Box::new(e) })
}

/// Recursive merge: nested tables combine key by key, anything else in
/// `from` replaces the value in `into`.
pub fn merge_tables(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge_tables(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
