//! Terrestrial actors: request construction, bootstrap consensus, the
//! certificate log, the monitor and the offline reset.

pub mod log;
pub mod monitor;
pub mod vault;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crypto::channel::{self, DecryptError, DOWNLINK_AAD, UPLINK_AAD};
use crate::crypto::{ChannelKey, PublicKey};
use crate::hsm::{BeaconMessage, CertificateResponse, CsrMessage};
use crate::time::SimTime;
use crate::wire::WireError;

pub use log::{
    verify_certificate, CertificateLog, ExportError, LogError, LogServer, SubmitOutcome,
};
pub use monitor::{monitor_check, CheckResult, MismatchAlarm, Monitor, MonitorEvent};
pub use vault::{reset_procedure, OfflineVault};

/// Seals a request for the HSM. Deterministic in `rng_seed`.
pub fn build_request(csr: &CsrMessage, key: &ChannelKey, rng_seed: &[u8]) -> Vec<u8> {
    channel::seal(key, rng_seed, UPLINK_AAD, &csr.encode())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error(transparent)]
    Decrypt(#[from] DecryptError),
    #[error("malformed response: {0}")]
    Malformed(#[from] WireError),
}

pub fn open_response(
    key: &ChannelKey,
    sealed: &[u8],
) -> Result<CertificateResponse, ResponseError> {
    let plain = channel::open(key, DOWNLINK_AAD, sealed)?;
    Ok(CertificateResponse::decode(&plain)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaconObservation {
    pub station_id: String,
    pub beacon: BeaconMessage,
    pub received_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Consensus {
    Online(PublicKey),
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} distinct public keys each reached the threshold; spoofing suspected", keys.len())]
pub struct ConflictError {
    pub keys: Vec<PublicKey>,
}

/// Largest number of distinct stations that saw `times` within any span of
/// `window_us`.
fn max_stations_in_window(mut seen: Vec<(SimTime, &str)>, window_us: u64) -> usize {
    seen.sort();
    let mut best = 0;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut lo = 0;
    for hi in 0..seen.len() {
        *counts.entry(seen[hi].1).or_default() += 1;
        while seen[hi].0 - seen[lo].0 > window_us {
            let c = counts.get_mut(seen[lo].1).unwrap();
            *c -= 1;
            if *c == 0 {
                counts.remove(seen[lo].1);
            }
            lo += 1;
        }
        best = best.max(counts.len());
    }
    best
}

/// Online with a key once at least `threshold` distinct stations observed
/// byte-identical, self-consistent beacons carrying it within `window_us`.
pub fn consensus_bootstrap(
    observations: &[BeaconObservation],
    threshold: usize,
    window_us: u64,
) -> Result<Consensus, ConflictError> {
    assert!(threshold >= 1, "consensus threshold must be at least 1");
    let mut by_key: BTreeMap<&PublicKey, Vec<(SimTime, &str)>> = BTreeMap::new();
    for o in observations.iter().filter(|o| o.beacon.verify()) {
        by_key
            .entry(&o.beacon.public_key)
            .or_default()
            .push((o.received_at, o.station_id.as_str()));
    }
    let agreed: Vec<PublicKey> = by_key
        .into_iter()
        .filter(|(_, seen)| {
            let stations: BTreeSet<&str> = seen.iter().map(|s| s.1).collect();
            stations.len() >= threshold
                && max_stations_in_window(seen.clone(), window_us) >= threshold
        })
        .map(|(k, _)| k.clone())
        .collect();
    match agreed.len() {
        0 => Ok(Consensus::Pending),
        1 => Ok(Consensus::Online(agreed.into_iter().next().unwrap())),
        _ => Err(ConflictError { keys: agreed }),
    }
}
