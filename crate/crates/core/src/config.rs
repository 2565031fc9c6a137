//! Scenario configuration.
//!
//! Config files are flat `key = value` text with `#` comments and
//! `include <path>` lines (later keys override earlier ones, so presets can
//! be included and then tweaked). Unknown keys are a hard error that names
//! the key.

use crate::sim::churn::ChurnModel;
use crate::sim::latency::LatencyModel;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{file}:{line}: expected `key = value` or `include <path>`")]
    Syntax { file: String, line: usize },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}`: invalid value `{value}`: {msg}")]
    BadValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("include cycle or depth limit at `{file}`")]
    IncludeDepth { file: String },
    #[error("io error reading `{file}`: {err}")]
    Io { file: String, err: std::io::Error },
}

/// Raw parsed key-value map.
#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    pairs: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "name",
    "n",
    "ring_bits",
    "fingers",
    "neighbors",
    "proof_queue",
    "f",
    "behaviors",
    "attack_rate",
    "succ_manip_rate",
    "lifetime_min",
    "rejoin",
    "horizon_min",
    "seed",
    "stabilize_ms",
    "finger_update_ms",
    "check_max_ms",
    "lookup_period_ms",
    "lookup_transport",
    "k_dummy",
    "walk_len",
    "pool_target",
    "pool_refresh_ms",
    "relay_delay_max_ms",
    "request_timeout_ms",
    "query_deadline_ms",
    "latency",
    "latency_median_ms",
    "latency_sigma",
    "jitter",
    "dos_protection",
    "witnesses",
    "maturity_grace_ms",
    "report_age_min_ms",
    "metrics_interval_ms",
    "kept_tables",
    "a",
    "trials",
    "presim_lookups",
    "pathset",
    "subset_cap",
];

impl KvConfig {
    pub fn parse_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = KvConfig::default();
        cfg.merge_text(text, origin, None, 0)?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = KvConfig::default();
        cfg.merge_file(path, 0)?;
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path, depth: usize) -> Result<(), ConfigError> {
        if depth > 8 {
            return Err(ConfigError::IncludeDepth {
                file: path.display().to_string(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Io {
            file: path.display().to_string(),
            err,
        })?;
        let dir = path.parent().map(|p| p.to_path_buf());
        self.merge_text(&text, &path.display().to_string(), dir.as_deref(), depth)
    }

    fn merge_text(
        &mut self,
        text: &str,
        origin: &str,
        dir: Option<&Path>,
        depth: usize,
    ) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let inc = rest.trim();
                let p = match dir {
                    Some(d) => d.join(inc),
                    None => PathBuf::from(inc),
                };
                self.merge_file(&p, depth + 1)?;
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
                file: origin.to_string(),
                line: i + 1,
            })?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { key });
            }
            self.pairs.insert(key, v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        assert!(KNOWN_KEYS.contains(&key), "unknown key {key}");
        self.pairs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.pairs.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: v.clone(),
                msg: e.to_string(),
            }),
        }
    }

    fn parse_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.pairs.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("on") | Some("true") | Some("1") => Ok(true),
            Some("off") | Some("false") | Some("0") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                msg: "expected on/off".into(),
            }),
        }
    }

    /// Stable fingerprint of the full key-value map.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in &self.pairs {
            h.update(k.as_bytes());
            h.update([b'=']);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Which malicious behaviors are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Behaviors {
    pub bias: bool,
    pub misdirect: bool,
    pub pollute_succ: bool,
    pub pollute_fingers: bool,
    pub selective_dos: bool,
}

impl Behaviors {
    pub fn any_active(&self) -> bool {
        self.bias || self.misdirect || self.pollute_succ || self.pollute_fingers || self.selective_dos
    }

    /// Colluders back manipulated fingers with fabricated predecessor lists
    /// and coordinated answers whenever finger manipulation is in play.
    pub fn collusion_support(&self) -> bool {
        self.misdirect || self.pollute_fingers
    }

    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut b = Behaviors::default();
        for tok in spec.split(',').map(|t| t.trim()).filter(|t| !t.is_empty()) {
            match tok {
                "bias" => b.bias = true,
                "misdirect" => b.misdirect = true,
                "pollute_succ" => b.pollute_succ = true,
                "pollute_fingers" => b.pollute_fingers = true,
                "dos" => b.selective_dos = true,
                "passive" | "none" => {}
                other => return Err(format!("unknown behavior `{other}`")),
            }
        }
        Ok(b)
    }

    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.bias {
            parts.push("bias");
        }
        if self.misdirect {
            parts.push("misdirect");
        }
        if self.pollute_succ {
            parts.push("pollute_succ");
        }
        if self.pollute_fingers {
            parts.push("pollute_fingers");
        }
        if self.selective_dos {
            parts.push("dos");
        }
        if parts.is_empty() {
            parts.push("passive");
        }
        parts.join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    Direct,
    AnonMultipath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathMode {
    /// Fresh exit pair per query (the full multi-path structure).
    Multi,
    /// One shared exit pair for every query of a lookup (degraded variant
    /// used for comparison).
    Single,
}

#[derive(Clone, Debug)]
pub enum LatencyCfg {
    Synthetic { median_ms: f64, sigma: f64 },
    MatrixFile(PathBuf),
}

/// Full event-simulation scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub ring_bits: u32,
    pub fingers: usize,
    pub neighbors: usize,
    pub proof_queue: usize,
    pub fraction_malicious: f64,
    pub behaviors: Behaviors,
    pub attack_rate: f64,
    pub succ_manip_rate: f64,
    pub churn: ChurnModel,
    pub horizon_min: f64,
    pub seed: u64,
    pub stabilize_ms: u64,
    pub finger_update_ms: u64,
    pub check_max_ms: u64,
    pub lookup_period_ms: u64,
    pub lookup_transport: Transport,
    pub k_dummy: usize,
    /// Random-walk phase length; `None` means ceil(log2 n).
    pub walk_len: Option<usize>,
    pub pool_target: usize,
    pub pool_refresh_ms: u64,
    pub relay_delay_max_ms: u64,
    pub request_timeout_ms: u64,
    pub query_deadline_ms: u64,
    pub latency: LatencyCfg,
    pub jitter: bool,
    pub dos_protection: bool,
    pub witnesses: usize,
    pub maturity_grace_ms: u64,
    pub report_age_min_ms: u64,
    pub metrics_interval_ms: u64,
    pub kept_tables: usize,
    pub config_fingerprint: u64,
}

impl Scenario {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let behaviors = match kv.get("behaviors") {
            None => Behaviors::default(),
            Some(spec) => Behaviors::parse(spec).map_err(|msg| ConfigError::BadValue {
                key: "behaviors".into(),
                value: spec.into(),
                msg,
            })?,
        };
        let lifetime = match kv.get("lifetime_min") {
            None | Some("inf") | Some("none") => None,
            Some(v) => Some(v.parse::<f64>().map_err(|e| ConfigError::BadValue {
                key: "lifetime_min".into(),
                value: v.into(),
                msg: e.to_string(),
            })?),
        };
        let transport = match kv.get("lookup_transport") {
            None | Some("direct") => Transport::Direct,
            Some("anon") => Transport::AnonMultipath,
            Some(v) => {
                return Err(ConfigError::BadValue {
                    key: "lookup_transport".into(),
                    value: v.into(),
                    msg: "expected direct|anon".into(),
                })
            }
        };
        let latency = match kv.get("latency") {
            None | Some("synthetic") => LatencyCfg::Synthetic {
                median_ms: kv.parse_as("latency_median_ms", 80.0)?,
                sigma: kv.parse_as("latency_sigma", 0.5)?,
            },
            Some(spec) => match spec.strip_prefix("matrix:") {
                Some(path) => LatencyCfg::MatrixFile(PathBuf::from(path)),
                None => {
                    return Err(ConfigError::BadValue {
                        key: "latency".into(),
                        value: spec.into(),
                        msg: "expected synthetic or matrix:<path>".into(),
                    })
                }
            },
        };
        let walk_len = match kv.get("walk_len") {
            None | Some("auto") => None,
            Some(v) => Some(v.parse::<usize>().map_err(|e| ConfigError::BadValue {
                key: "walk_len".into(),
                value: v.into(),
                msg: e.to_string(),
            })?),
        };
        let sc = Scenario {
            name: kv.get("name").unwrap_or("scenario").to_string(),
            n: kv.parse_as("n", 1000usize)?,
            ring_bits: kv.parse_as("ring_bits", 32u32)?,
            fingers: kv.parse_as("fingers", 12usize)?,
            neighbors: kv.parse_as("neighbors", 6usize)?,
            proof_queue: kv.parse_as("proof_queue", 6usize)?,
            fraction_malicious: kv.parse_as("f", 0.2f64)?,
            behaviors,
            attack_rate: kv.parse_as("attack_rate", 1.0f64)?,
            succ_manip_rate: kv.parse_as("succ_manip_rate", 0.5f64)?,
            churn: ChurnModel {
                mean_lifetime_min: lifetime,
                rejoin: kv.parse_bool("rejoin", true)?,
            },
            horizon_min: kv.parse_as("horizon_min", 60.0f64)?,
            seed: kv.parse_as("seed", 0u64)?,
            stabilize_ms: kv.parse_as("stabilize_ms", 2_000u64)?,
            finger_update_ms: kv.parse_as("finger_update_ms", 30_000u64)?,
            check_max_ms: kv.parse_as("check_max_ms", 60_000u64)?,
            lookup_period_ms: kv.parse_as("lookup_period_ms", 60_000u64)?,
            lookup_transport: transport,
            k_dummy: kv.parse_as("k_dummy", 6usize)?,
            walk_len,
            pool_target: kv.parse_as("pool_target", 8usize)?,
            pool_refresh_ms: kv.parse_as("pool_refresh_ms", 90_000u64)?,
            relay_delay_max_ms: kv.parse_as("relay_delay_max_ms", 100u64)?,
            request_timeout_ms: kv.parse_as("request_timeout_ms", 2_000u64)?,
            query_deadline_ms: kv.parse_as("query_deadline_ms", 6_000u64)?,
            latency,
            jitter: kv.parse_bool("jitter", true)?,
            dos_protection: kv.parse_bool("dos_protection", true)?,
            witnesses: kv.parse_as("witnesses", 4usize)?,
            maturity_grace_ms: kv.parse_as("maturity_grace_ms", 20_000u64)?,
            report_age_min_ms: kv.parse_as("report_age_min_ms", 30_000u64)?,
            metrics_interval_ms: kv.parse_as("metrics_interval_ms", 60_000u64)?,
            kept_tables: kv.parse_as("kept_tables", 16usize)?,
            config_fingerprint: kv.fingerprint(),
        };
        if sc.n < 8 {
            return Err(ConfigError::BadValue {
                key: "n".into(),
                value: sc.n.to_string(),
                msg: "network too small".into(),
            });
        }
        if sc.fingers as u32 > sc.ring_bits {
            return Err(ConfigError::BadValue {
                key: "fingers".into(),
                value: sc.fingers.to_string(),
                msg: "more finger slots than ring bits".into(),
            });
        }
        Ok(sc)
    }

    pub fn walk_len(&self) -> usize {
        self.walk_len
            .unwrap_or_else(|| (self.n.max(2) as f64).log2().ceil() as usize)
            .max(1)
    }

    pub fn horizon_ms(&self) -> u64 {
        (self.horizon_min * 60_000.0).round() as u64
    }

    pub fn build_latency(&self) -> Result<LatencyModel, ConfigError> {
        match &self.latency {
            LatencyCfg::Synthetic { median_ms, sigma } => {
                Ok(LatencyModel::synthetic(*median_ms, *sigma, self.seed))
            }
            LatencyCfg::MatrixFile(path) => {
                LatencyModel::from_matrix_file(path).map_err(|e| ConfigError::BadValue {
                    key: "latency".into(),
                    value: path.display().to_string(),
                    msg: e.to_string(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_standard_setup() {
        let kv = KvConfig::parse_str("", "test").unwrap();
        let sc = Scenario::from_kv(&kv).unwrap();
        assert_eq!(sc.n, 1000);
        assert_eq!(sc.fingers, 12);
        assert_eq!(sc.neighbors, 6);
        assert_eq!(sc.proof_queue, 6);
        assert_eq!(sc.stabilize_ms, 2_000);
        assert_eq!(sc.finger_update_ms, 30_000);
        assert_eq!(sc.check_max_ms, 60_000);
        assert_eq!(sc.lookup_period_ms, 60_000);
        assert!((sc.fraction_malicious - 0.2).abs() < 1e-12);
        assert_eq!(sc.walk_len(), 10);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = KvConfig::parse_str("bogus_key = 3", "test").unwrap_err();
        match err {
            ConfigError::UnknownKey { key } => assert_eq!(key, "bogus_key"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn overrides_and_comments() {
        let kv = KvConfig::parse_str("n = 500 # small\nn = 700\nbehaviors = bias,dos\n", "t").unwrap();
        let sc = Scenario::from_kv(&kv).unwrap();
        assert_eq!(sc.n, 700);
        assert!(sc.behaviors.bias && sc.behaviors.selective_dos);
        assert!(!sc.behaviors.misdirect);
    }
}
