//! Scenario configuration, the discrete-event engine and its outputs.

mod config;
mod engine;
mod events;

pub use config::{
    parse_config, to_toml, AdversaryAction, ConfigError, PeerContact, ScenarioConfig,
    ScheduledRequest, StationConfig, WorkloadItem,
};
pub use engine::{CertFate, CertRecord, Engine, RunOutput};
pub use events::{events_to_jsonl, EventKind, Metrics, SimEvent};

use crate::crypto::ENVELOPE_OVERHEAD;
use crate::link::{message_airtime_us, LinkConfig};
use crate::time::secs_to_us;

/// Sealed length of a certificate response on the downlink.
pub const RESPONSE_LEN: usize = crate::hsm::CertificateResponse::ENCODED_LEN + ENVELOPE_OVERHEAD;

/// Requests of `csr_bytes` that fit back to back in one pass on the uplink.
pub fn analytic_capacity(link: &LinkConfig, csr_bytes: usize) -> u64 {
    let per_request = message_airtime_us(csr_bytes + ENVELOPE_OVERHEAD, link.uplink_bps);
    secs_to_us(link.pass_duration_s) / per_request
}

/// Validates `config` and runs it to completion.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    Ok(Engine::new(config.clone())?.run())
}
