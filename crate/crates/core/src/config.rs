//! Hardware description: cores, DRAM, NoC, vector op latencies, scheduling policy.
//!
//! Configs are JSON. Optional fields are materialized on load so that the echoed
//! config in a report fully determines a run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::VectorKind;

pub const MOBILE_PRESET: &str = include_str!("../../../configs/mobile.json");
pub const SERVER_PRESET: &str = include_str!("../../../configs/server.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing config field `{0}`")]
    MissingField(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("inconsistent config: `{first}` vs `{second}`: {reason}")]
    Inconsistent {
        first: String,
        second: String,
        reason: String,
    },
    #[error("bad override `{0}` (expected key.path=value)")]
    Override(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn default_alus() -> u64 {
    16
}
fn default_acc_elem() -> u64 {
    4
}
fn default_access() -> u64 {
    64
}
fn default_queue() -> usize {
    32
}
fn default_starvation() -> u64 {
    2000
}
fn default_flit() -> u64 {
    8
}
fn default_header_flits() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_bucket() -> u64 {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreConfig {
    pub array_h: u64,
    pub array_w: u64,
    pub vector_lanes: u64,
    #[serde(default = "default_alus")]
    pub alus_per_lane: u64,
    pub spm_bytes: u64,
    pub acc_bytes: u64,
    /// Bytes the scratchpad delivers per cycle per port.
    pub spm_word_bytes: u64,
    /// Accumulator element width (partial sums are kept wide).
    #[serde(default = "default_acc_elem")]
    pub acc_elem_bytes: u64,
    pub clock_hz: u64,
}

impl CoreConfig {
    pub fn spm_partition_bytes(&self) -> u64 {
        self.spm_bytes / 2
    }

    pub fn acc_partition_bytes(&self) -> u64 {
        self.acc_bytes / 2
    }

    pub fn vector_width(&self) -> u64 {
        self.vector_lanes * self.alus_per_lane
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramTiming {
    #[serde(rename = "tCL")]
    pub t_cl: f64,
    #[serde(rename = "tRCD")]
    pub t_rcd: f64,
    #[serde(rename = "tRAS")]
    pub t_ras: f64,
    #[serde(rename = "tWR")]
    pub t_wr: f64,
    #[serde(rename = "tRP")]
    pub t_rp: f64,
}

/// Timing constraints converted to DRAM clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramCycles {
    pub cl: u64,
    pub rcd: u64,
    pub ras: u64,
    pub wr: u64,
    pub rp: u64,
    pub burst: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramConfig {
    pub channels: u64,
    pub banks_per_channel: u64,
    pub row_bytes: u64,
    #[serde(default = "default_access")]
    pub access_bytes: u64,
    pub timing_ns: DramTiming,
    pub dram_clock_hz: u64,
    pub peak_bytes_per_cycle: u64,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    /// Age (DRAM cycles) after which the oldest request overrides row-hit priority.
    #[serde(default = "default_starvation")]
    pub starvation_cycles: u64,
    #[serde(default)]
    pub base_addr: u64,
}

fn ns_to_cycles(ns: f64, hz: u64) -> u64 {
    let exact = ns * hz as f64 / 1e9;
    // Absorb float noise such as 22.000000000000004.
    (exact - 1e-9).ceil().max(0.0) as u64
}

impl DramConfig {
    pub fn cycles(&self) -> DramCycles {
        let hz = self.dram_clock_hz;
        DramCycles {
            cl: ns_to_cycles(self.timing_ns.t_cl, hz),
            rcd: ns_to_cycles(self.timing_ns.t_rcd, hz),
            ras: ns_to_cycles(self.timing_ns.t_ras, hz),
            wr: ns_to_cycles(self.timing_ns.t_wr, hz),
            rp: ns_to_cycles(self.timing_ns.t_rp, hz),
            burst: self.access_bytes.div_ceil(self.peak_bytes_per_cycle),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NocModel {
    Simple,
    Crossbar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NocConfig {
    pub model: NocModel,
    /// Simple model: fixed traversal latency.
    #[serde(default)]
    pub latency_cycles: u64,
    /// Simple model: per-link serialization bandwidth.
    #[serde(default)]
    pub bytes_per_cycle: u64,
    #[serde(default = "default_flit")]
    pub flit_bytes: u64,
    #[serde(default = "default_header_flits")]
    pub header_flits: u64,
    /// Crossbar: [input ports (cores), output ports (memory channels)].
    #[serde(default)]
    pub ports: Option<[u64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    TimeShare,
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default)]
    pub policy: Policy,
    /// Tenant (request id unless the workload names a tenant) to owned cores.
    #[serde(default)]
    pub partition: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default)]
    pub timeline_window: Option<u64>,
    #[serde(default)]
    pub trace: bool,
    /// Skip cycles in which no component can change state. Results do not depend on
    /// it, so it is left out of the echoed config.
    #[serde(default = "default_true", skip_serializing)]
    pub event_jump: bool,
    /// Per-node timing records in the report.
    #[serde(default)]
    pub node_records: bool,
    #[serde(default = "default_bucket")]
    pub latency_bucket: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            timeline_window: None,
            trace: false,
            event_jump: true,
            node_records: false,
            latency_bucket: default_bucket(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub name: String,
    pub num_cores: usize,
    pub core: CoreConfig,
    pub dram: DramConfig,
    pub noc: NocConfig,
    pub op_latency: BTreeMap<VectorKind, u64>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub stats: StatsConfig,
}

/// Set `a.b.c = value` inside a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = serde_json::from_str(raw.trim())
        .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last path component")
}

impl SimConfig {
    pub fn from_json(text: &str, overrides: &[String]) -> Result<SimConfig, ConfigError> {
        let mut doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: SimConfig = serde_json::from_value(doc).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("missing field `") {
                Some(rest) => ConfigError::MissingField(rest.split('`').next().unwrap_or(rest).to_string()),
                None => ConfigError::Parse(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A shipped preset (`mobile` or `server`).
    pub fn preset(name: &str) -> Option<SimConfig> {
        let text = match name {
            "mobile" => MOBILE_PRESET,
            "server" => SERVER_PRESET,
            _ => return None,
        };
        Some(Self::from_json(text, &[]).expect("shipped presets are valid"))
    }

    /// Load from a file path, or a preset name when no such file exists.
    pub fn load(path: &str, overrides: &[String]) -> Result<SimConfig, ConfigError> {
        let p = Path::new(path);
        if !p.exists() {
            let text = match path {
                "mobile" => MOBILE_PRESET,
                "server" => SERVER_PRESET,
                _ => {
                    return Err(ConfigError::Io {
                        path: path.to_string(),
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or preset"),
                    })
                }
            };
            return Self::from_json(text, overrides);
        }
        let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.core;
        if self.num_cores == 0 {
            return Err(invalid("num_cores", "must be positive"));
        }
        for (name, v) in [
            ("core.array_h", c.array_h),
            ("core.array_w", c.array_w),
            ("core.vector_lanes", c.vector_lanes),
            ("core.alus_per_lane", c.alus_per_lane),
            ("core.spm_bytes", c.spm_bytes),
            ("core.acc_bytes", c.acc_bytes),
            ("core.spm_word_bytes", c.spm_word_bytes),
            ("core.acc_elem_bytes", c.acc_elem_bytes),
            ("core.clock_hz", c.clock_hz),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if c.spm_bytes % 2 != 0 {
            return Err(invalid("core.spm_bytes", "must be even (two partitions)"));
        }
        if c.acc_bytes % 2 != 0 {
            return Err(invalid("core.acc_bytes", "must be even (two partitions)"));
        }

        let d = &self.dram;
        for (name, v) in [
            ("dram.channels", d.channels),
            ("dram.banks_per_channel", d.banks_per_channel),
            ("dram.row_bytes", d.row_bytes),
            ("dram.access_bytes", d.access_bytes),
            ("dram.dram_clock_hz", d.dram_clock_hz),
            ("dram.peak_bytes_per_cycle", d.peak_bytes_per_cycle),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if !d.channels.is_power_of_two() {
            return Err(invalid("dram.channels", "channel hashing needs a power of two"));
        }
        if crate::dram::ipoly::polynomial_for(d.channels).is_none() {
            return Err(invalid("dram.channels", "no interleaving polynomial for this many channels"));
        }
        if !d.access_bytes.is_power_of_two() {
            return Err(invalid("dram.access_bytes", "must be a power of two"));
        }
        if d.row_bytes % d.access_bytes != 0 {
            return Err(ConfigError::Inconsistent {
                first: "dram.access_bytes".into(),
                second: "dram.row_bytes".into(),
                reason: "access granularity must divide the row size".into(),
            });
        }
        if d.queue_capacity == 0 {
            return Err(invalid("dram.queue_capacity", "must be positive"));
        }
        let t = &d.timing_ns;
        for (name, v) in [
            ("dram.timing_ns.tCL", t.t_cl),
            ("dram.timing_ns.tRCD", t.t_rcd),
            ("dram.timing_ns.tRAS", t.t_ras),
            ("dram.timing_ns.tWR", t.t_wr),
            ("dram.timing_ns.tRP", t.t_rp),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, "must be a positive number of ns"));
            }
        }
        if t.t_ras < t.t_rcd {
            return Err(ConfigError::Inconsistent {
                first: "dram.timing_ns.tRAS".into(),
                second: "dram.timing_ns.tRCD".into(),
                reason: "tRAS must be at least tRCD".into(),
            });
        }

        let n = &self.noc;
        match n.model {
            NocModel::Simple => {
                if n.latency_cycles == 0 {
                    return Err(invalid("noc.latency_cycles", "must be positive for the simple model"));
                }
                if n.bytes_per_cycle == 0 {
                    return Err(invalid("noc.bytes_per_cycle", "must be positive for the simple model"));
                }
            }
            NocModel::Crossbar => {
                if n.flit_bytes == 0 {
                    return Err(invalid("noc.flit_bytes", "must be positive"));
                }
                let [ins, outs] = n.ports.ok_or_else(|| ConfigError::MissingField("noc.ports".into()))?;
                if ins != self.num_cores as u64 {
                    return Err(ConfigError::Inconsistent {
                        first: "noc.ports[0]".into(),
                        second: "num_cores".into(),
                        reason: format!("crossbar has {ins} input ports for {} cores", self.num_cores),
                    });
                }
                if outs != d.channels {
                    return Err(ConfigError::Inconsistent {
                        first: "noc.ports[1]".into(),
                        second: "dram.channels".into(),
                        reason: format!("crossbar has {outs} output ports for {} channels", d.channels),
                    });
                }
            }
        }

        for kind in VectorKind::ALL {
            if !self.op_latency.contains_key(&kind) {
                return Err(ConfigError::MissingField(format!("op_latency.{}", kind.name())));
            }
        }

        let mut owned: BTreeSet<usize> = BTreeSet::new();
        for (tenant, cores) in &self.scheduler.partition {
            for &core in cores {
                if core >= self.num_cores {
                    return Err(ConfigError::Inconsistent {
                        first: format!("scheduler.partition.{tenant}"),
                        second: "num_cores".into(),
                        reason: format!("core {core} does not exist"),
                    });
                }
                if !owned.insert(core) {
                    return Err(invalid(
                        &format!("scheduler.partition.{tenant}"),
                        format!("core {core} is assigned to more than one tenant"),
                    ));
                }
            }
        }
        if let Some(0) = self.stats.timeline_window {
            return Err(invalid("stats.timeline_window", "must be positive"));
        }
        if self.stats.latency_bucket == 0 {
            return Err(invalid("stats.latency_bucket", "must be positive"));
        }
        Ok(())
    }

    /// The config with all defaults filled in, as JSON.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mobile_preset_matches_table() {
        let cfg = SimConfig::preset("mobile").unwrap();
        assert_eq!(cfg.num_cores, 4);
        assert_eq!((cfg.core.array_h, cfg.core.array_w), (8, 8));
        assert_eq!(cfg.core.spm_bytes, 64 * 1024);
        assert_eq!(cfg.core.acc_bytes, 16 * 1024);
        assert_eq!(cfg.core.vector_lanes, 8);
        assert_eq!(cfg.core.alus_per_lane, 16);
        let t = cfg.dram.timing_ns;
        assert_eq!((t.t_cl, t.t_rcd, t.t_ras, t.t_wr, t.t_rp), (22.0, 22.0, 56.0, 24.0, 22.0));
        // 12 GB/s aggregate
        assert_eq!(
            cfg.dram.channels * cfg.dram.peak_bytes_per_cycle * cfg.dram.dram_clock_hz,
            12_000_000_000
        );
        assert_eq!(cfg.noc.ports, Some([4, 2]));
        assert_eq!(cfg.noc.flit_bytes, 8);
    }

    #[test]
    fn server_preset_matches_table() {
        let cfg = SimConfig::preset("server").unwrap();
        assert_eq!((cfg.core.array_h, cfg.core.array_w), (128, 128));
        assert_eq!(cfg.core.spm_bytes, 32 << 20);
        assert_eq!(cfg.core.acc_bytes, 4 << 20);
        assert_eq!(cfg.core.vector_lanes, 128);
        let t = cfg.dram.timing_ns;
        assert_eq!((t.t_cl, t.t_rcd, t.t_ras, t.t_wr, t.t_rp), (7.0, 7.0, 17.0, 8.0, 7.0));
        assert_eq!(
            cfg.dram.channels * cfg.dram.peak_bytes_per_cycle * cfg.dram.dram_clock_hz,
            614_400_000_000
        );
        assert_eq!(cfg.noc.ports, Some([4, 16]));
    }

    #[test]
    fn crossbar_ports_must_match_channels() {
        let err = SimConfig::from_json(MOBILE_PRESET, &["dram.channels=16".into()]).unwrap_err();
        match err {
            ConfigError::Inconsistent { first, second, .. } => {
                assert_eq!(first, "noc.ports[1]");
                assert_eq!(second, "dram.channels");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn override_is_reflected_in_echo() {
        let cfg = SimConfig::from_json(MOBILE_PRESET, &["core.array_h=16".into()]).unwrap();
        assert_eq!(cfg.core.array_h, 16);
        assert_eq!(cfg.echo()["core"]["array_h"], 16);
        // defaults are materialized
        assert_eq!(cfg.echo()["stats"]["latency_bucket"], cfg.stats.latency_bucket);
    }

    #[test]
    fn missing_field_is_named() {
        let mut doc: serde_json::Value = serde_json::from_str(MOBILE_PRESET).unwrap();
        doc["core"].as_object_mut().unwrap().remove("spm_bytes");
        let err = SimConfig::from_json(&doc.to_string(), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::MissingField(ref f) if f == "spm_bytes"), "{err}");
    }

    #[test]
    fn missing_vector_latency_is_named() {
        let mut doc: serde_json::Value = serde_json::from_str(MOBILE_PRESET).unwrap();
        doc["op_latency"].as_object_mut().unwrap().remove("GELU");
        let err = SimConfig::from_json(&doc.to_string(), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::MissingField(ref f) if f == "op_latency.GELU"), "{err}");
    }

    #[test]
    fn overlapping_partitions_rejected() {
        let err = SimConfig::from_json(
            MOBILE_PRESET,
            &[
                "scheduler.policy=\"spatial\"".into(),
                "scheduler.partition={\"a\":[0,1],\"b\":[1,2]}".into(),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }), "{err}");
    }

    #[test]
    fn non_power_of_two_channels_rejected() {
        let err = SimConfig::from_json(MOBILE_PRESET, &["dram.channels=3".into(), "noc.ports=[4,3]".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "dram.channels"));
    }

    #[test]
    fn timing_conversion() {
        let mut cfg = SimConfig::preset("mobile").unwrap();
        cfg.dram.dram_clock_hz = 1_000_000_000;
        let c = cfg.dram.cycles();
        assert_eq!((c.cl, c.rcd, c.ras, c.wr, c.rp), (22, 22, 56, 24, 22));
        assert_eq!(c.burst, 8);
        let server = SimConfig::preset("server").unwrap().dram.cycles();
        // 7 ns at 1.2 GHz = 8.4 -> 9 cycles
        assert_eq!(server.cl, 9);
        assert_eq!(server.burst, 2);
    }
}
