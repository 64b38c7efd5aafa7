//! Scenario configuration, read from TOML.
//!
//! Every field is optional; omitted fields take the defaults shown by
//! `ScenarioConfig::default()`. Unknown keys are rejected. Errors carry the
//! dotted path of the offending field, e.g. `link.tx_duty_cycle` or
//! `adversary[1].at_s`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::ENVELOPE_OVERHEAD;
use crate::hsm::{CsrMessage, HsmConfig};
use crate::link::frame::MAX_PAYLOAD;
use crate::link::LinkConfig;
use crate::power::PowerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: u64,
    /// Distinct stations that must agree on the beacon key.
    pub consensus_threshold: usize,
    pub consensus_window_s: f64,
    pub beacon_period_s: f64,
    /// Broadcast every signed certificate in the clear instead of returning
    /// an encrypted response to the requester.
    pub broadcast_certificates: bool,
    /// Delay between an alarm and the offline reset.
    pub reset_delay_s: f64,
    /// Grace before a beacon ahead of the log alarms. Defaults to half a beacon period.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor_grace_s: Option<f64>,
    /// Delay between a station receiving a certificate and the log appending it.
    pub submit_latency_s: f64,
    pub response_timeout_s: f64,
    /// Re-sends after the first attempt before a request is abandoned.
    pub request_retries: u32,
    /// The first station issues the workload; all stations collect beacons.
    pub stations: Vec<StationConfig>,
    pub link: LinkConfig,
    pub power: PowerConfig,
    pub hsm: HsmConfig,
    pub workload: Vec<WorkloadItem>,
    pub adversary: Vec<AdversaryAction>,
    pub peer_contacts: Vec<PeerContact>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 5400,
            consensus_threshold: 1,
            consensus_window_s: 5400.0,
            beacon_period_s: 60.0,
            broadcast_certificates: false,
            reset_delay_s: 30.0,
            monitor_grace_s: None,
            submit_latency_s: 2.0,
            response_timeout_s: 45.0,
            request_retries: 5,
            stations: vec![StationConfig::default()],
            link: LinkConfig::default(),
            power: PowerConfig::default(),
            hsm: HsmConfig::default(),
            workload: Vec::new(),
            adversary: Vec::new(),
            peer_contacts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationConfig {
    pub id: String,
    pub pass_offset_s: f64,
}

impl Default for StationConfig {
    fn default() -> Self {
        Self {
            id: "svalbard".into(),
            pass_offset_s: 0.0,
        }
    }
}

/// `count` requests of `csr_bytes` each, the first at `at_s` and the rest
/// `spacing_s` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadItem {
    pub at_s: f64,
    pub csr_bytes: usize,
    pub count: u32,
    pub spacing_s: f64,
}

impl Default for WorkloadItem {
    fn default() -> Self {
        Self {
            at_s: 0.0,
            csr_bytes: CsrMessage::DEFAULT_TOTAL_LEN,
            count: 1,
            spacing_s: 0.0,
        }
    }
}

fn default_csr_bytes() -> usize {
    CsrMessage::DEFAULT_TOTAL_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryAction {
    /// Copies the ground's current channel key.
    StealKey { at_s: f64 },
    /// Injects a request on the uplink, encrypted under the stolen key if
    /// one was taken earlier and under a guessed key otherwise. The
    /// resulting certificate is never submitted to the log.
    ForgeRequest {
        at_s: f64,
        #[serde(default = "default_csr_bytes")]
        csr_bytes: usize,
    },
    /// Drops the primary station's log submission for workload request
    /// number `request` (0-based, in schedule order).
    SuppressLogSubmission { request: usize },
    /// Injects a beacon signed by an adversary key, heard by the listed
    /// stations (all stations when empty).
    SpoofBeacon {
        at_s: f64,
        #[serde(default)]
        stations: Vec<String>,
    },
    /// Overrides the HSM fault rate during `[from_s, to_s)`.
    InjectFaults { rate: f64, from_s: f64, to_s: f64 },
}

/// Contact with a second satellite HSM for mutual attestation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerContact {
    pub at_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config at `{}`: {}", self.path, self.message)
        }
    }
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// One scheduled request after expanding `count`/`spacing_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledRequest {
    pub index: usize,
    pub at_s: f64,
    pub csr_bytes: usize,
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::at(path, inner.message().trim().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn to_toml(config: &ScenarioConfig) -> String {
    toml::to_string(config).expect("scenario config serializes to TOML")
}

impl ScenarioConfig {
    pub fn monitor_grace_s(&self) -> f64 {
        self.monitor_grace_s.unwrap_or(self.beacon_period_s / 2.0)
    }

    /// Workload in schedule order; ties keep declaration order.
    pub fn requests(&self) -> Vec<ScheduledRequest> {
        let mut out: Vec<ScheduledRequest> = Vec::new();
        for item in &self.workload {
            for k in 0..item.count {
                out.push(ScheduledRequest {
                    index: 0,
                    at_s: item.at_s + k as f64 * item.spacing_s,
                    csr_bytes: item.csr_bytes,
                });
            }
        }
        out.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
        for (i, r) in out.iter_mut().enumerate() {
            r.index = i;
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::at(
                "seed",
                format!("{} exceeds {}", self.seed, i64::MAX),
            ));
        }
        let duration = self.duration_s as f64;
        let time = |path: String, t: f64| -> Result<(), ConfigError> {
            if t.is_finite() && (0.0..=duration).contains(&t) {
                Ok(())
            } else {
                Err(ConfigError::at(
                    path,
                    format!("time {t} outside [0, {duration}]"),
                ))
            }
        };
        let positive = |path: &str, v: f64| -> Result<(), ConfigError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::at(path, "must be positive"))
            }
        };
        let non_negative = |path: &str, v: f64| -> Result<(), ConfigError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::at(path, "must be non-negative"))
            }
        };

        if self.duration_s == 0 {
            return Err(ConfigError::at("duration_s", "must be positive"));
        }
        if self.stations.is_empty() {
            return Err(ConfigError::at(
                "stations",
                "at least one station is required",
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, s) in self.stations.iter().enumerate() {
            if s.id.is_empty() {
                return Err(ConfigError::at(
                    format!("stations[{i}].id"),
                    "must not be empty",
                ));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(ConfigError::at(
                    format!("stations[{i}].id"),
                    format!("duplicate station id {:?}", s.id),
                ));
            }
            non_negative(&format!("stations[{i}].pass_offset_s"), s.pass_offset_s)?;
        }
        if self.consensus_threshold == 0 || self.consensus_threshold > self.stations.len() {
            return Err(ConfigError::at(
                "consensus_threshold",
                format!(
                    "must be between 1 and the number of stations ({})",
                    self.stations.len()
                ),
            ));
        }
        positive("consensus_window_s", self.consensus_window_s)?;
        positive("beacon_period_s", self.beacon_period_s)?;
        non_negative("reset_delay_s", self.reset_delay_s)?;
        if let Some(g) = self.monitor_grace_s {
            non_negative("monitor_grace_s", g)?;
        }
        non_negative("submit_latency_s", self.submit_latency_s)?;
        positive("response_timeout_s", self.response_timeout_s)?;

        self.link
            .validate()
            .map_err(|e| ConfigError::at(format!("link.{}", e.field), e.reason))?;
        self.power
            .validate()
            .map_err(|e| ConfigError::at(format!("power.{}", e.field), e.reason))?;
        if (self.power.orbit_period_s() - self.link.orbit_period_s).abs() > 1e-9 {
            return Err(ConfigError::at(
                "power.eclipse_s",
                format!(
                    "daylight_s + eclipse_s = {} must equal link.orbit_period_s = {}",
                    self.power.orbit_period_s(),
                    self.link.orbit_period_s
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.hsm.fault_rate) {
            return Err(ConfigError::at("hsm.fault_rate", "must be in [0, 1]"));
        }

        let csr_bytes_ok = |path: String, n: usize| -> Result<(), ConfigError> {
            if n < CsrMessage::FIXED_LEN || n + ENVELOPE_OVERHEAD > MAX_PAYLOAD {
                Err(ConfigError::at(
                    path,
                    format!(
                        "must be in [{}, {}]",
                        CsrMessage::FIXED_LEN,
                        MAX_PAYLOAD - ENVELOPE_OVERHEAD
                    ),
                ))
            } else {
                Ok(())
            }
        };
        for (i, w) in self.workload.iter().enumerate() {
            time(format!("workload[{i}].at_s"), w.at_s)?;
            csr_bytes_ok(format!("workload[{i}].csr_bytes"), w.csr_bytes)?;
            non_negative(&format!("workload[{i}].spacing_s"), w.spacing_s)?;
            if w.count > 1 {
                time(
                    format!("workload[{i}].spacing_s"),
                    w.at_s + (w.count - 1) as f64 * w.spacing_s,
                )?;
            }
        }
        let total_requests = self.requests().len();
        for (i, a) in self.adversary.iter().enumerate() {
            let p = |field: &str| format!("adversary[{i}].{field}");
            match a {
                AdversaryAction::StealKey { at_s } => time(p("at_s"), *at_s)?,
                AdversaryAction::ForgeRequest { at_s, csr_bytes } => {
                    time(p("at_s"), *at_s)?;
                    csr_bytes_ok(p("csr_bytes"), *csr_bytes)?;
                }
                AdversaryAction::SuppressLogSubmission { request } => {
                    if *request >= total_requests {
                        return Err(ConfigError::at(
                            p("request"),
                            format!("no such request; the workload has {total_requests}"),
                        ));
                    }
                }
                AdversaryAction::SpoofBeacon { at_s, stations } => {
                    time(p("at_s"), *at_s)?;
                    for (j, s) in stations.iter().enumerate() {
                        if !ids.contains(s.as_str()) {
                            return Err(ConfigError::at(
                                format!("adversary[{i}].stations[{j}]"),
                                format!("unknown station {s:?}"),
                            ));
                        }
                    }
                }
                AdversaryAction::InjectFaults { rate, from_s, to_s } => {
                    if !(0.0..=1.0).contains(rate) {
                        return Err(ConfigError::at(p("rate"), "must be in [0, 1]"));
                    }
                    time(p("from_s"), *from_s)?;
                    time(p("to_s"), *to_s)?;
                    if from_s > to_s {
                        return Err(ConfigError::at(p("to_s"), "must not precede from_s"));
                    }
                }
            }
        }
        for (i, c) in self.peer_contacts.iter().enumerate() {
            time(format!("peer_contacts[{i}].at_s"), c.at_s)?;
        }
        Ok(())
    }
}
