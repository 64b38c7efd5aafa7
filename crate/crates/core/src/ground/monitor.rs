//! Compares beacon accumulator roots with the public log.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::log::{CertificateLog, LogServer};
use crate::accumulator::Digest;
use crate::hsm::BeaconMessage;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckResult {
    /// The beacon root equals the log root at the beacon's size. The log
    /// may be longer if newer submissions have already landed.
    Ok,
    /// The beacon commits to more certificates than the log holds.
    BeaconAhead,
    /// The beacon root is not a prefix root of the log.
    Mismatch,
    EpochSkew {
        beacon_epoch: u64,
        log_epoch: u64,
    },
}

/// The beacon signature is assumed to have been checked by the caller.
pub fn monitor_check(beacon: &BeaconMessage, log: &CertificateLog) -> CheckResult {
    if beacon.epoch != log.epoch() {
        return CheckResult::EpochSkew {
            beacon_epoch: beacon.epoch,
            log_epoch: log.epoch(),
        };
    }
    if beacon.log_size > log.len() {
        return CheckResult::BeaconAhead;
    }
    match log.entries().root_at(beacon.log_size) {
        Ok(root) if root == beacon.accumulator_root => CheckResult::Ok,
        _ => CheckResult::Mismatch,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchAlarm {
    pub epoch: u64,
    pub beacon_sequence: u64,
    pub beacon_root: Digest,
    pub log_root: Digest,
    pub beacon_log_size: u64,
    pub local_log_size: u64,
    pub raised_at: SimTime,
    /// When the satellite emitted the beacon that triggered the alarm.
    pub beacon_emitted_at: SimTime,
}

impl MismatchAlarm {
    pub fn time_to_detection_us(&self) -> u64 {
        self.raised_at - self.beacon_emitted_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorEvent {
    Ok,
    /// Beacon ahead of the log; rechecked once the grace window has passed.
    Deferred {
        recheck_at: SimTime,
    },
    Alarm(MismatchAlarm),
    /// Beacon from a later epoch than the log knows: the HSM has moved on.
    EpochSkew {
        beacon_epoch: u64,
        log_epoch: u64,
    },
    /// Beacon from an epoch whose log has already been superseded.
    Stale,
    /// Already seen via another station, or its epoch already alarmed.
    Ignored,
}

#[derive(Debug, Clone)]
struct Pending {
    beacon: BeaconMessage,
    emitted_at: SimTime,
    recheck_at: SimTime,
}

/// Raises at most one alarm per epoch; a reset is the only remedy.
#[derive(Debug, Clone)]
pub struct Monitor {
    grace_us: u64,
    pending: VecDeque<Pending>,
    alarmed: BTreeSet<u64>,
    last_sequence: Option<u64>,
}

impl Monitor {
    pub fn new(grace_us: u64) -> Self {
        Self {
            grace_us,
            pending: VecDeque::new(),
            alarmed: BTreeSet::new(),
            last_sequence: None,
        }
    }

    pub fn alarmed(&self, epoch: u64) -> bool {
        self.alarmed.contains(&epoch)
    }

    pub fn next_recheck(&self) -> Option<SimTime> {
        self.pending.front().map(|p| p.recheck_at)
    }

    fn alarm(
        &mut self,
        beacon: &BeaconMessage,
        emitted_at: SimTime,
        now: SimTime,
        log: &CertificateLog,
    ) -> MismatchAlarm {
        self.alarmed.insert(beacon.epoch);
        self.pending.retain(|p| p.beacon.epoch != beacon.epoch);
        MismatchAlarm {
            epoch: beacon.epoch,
            beacon_sequence: beacon.sequence,
            beacon_root: beacon.accumulator_root,
            log_root: log.root(),
            beacon_log_size: beacon.log_size,
            local_log_size: log.len(),
            raised_at: now,
            beacon_emitted_at: emitted_at,
        }
    }

    pub fn observe(
        &mut self,
        beacon: &BeaconMessage,
        emitted_at: SimTime,
        now: SimTime,
        logs: &LogServer,
    ) -> MonitorEvent {
        if self.last_sequence.is_some_and(|s| beacon.sequence <= s) {
            return MonitorEvent::Ignored;
        }
        self.last_sequence = Some(beacon.sequence);
        if self.alarmed(beacon.epoch) {
            return MonitorEvent::Ignored;
        }
        let active = logs.active();
        let Some(log) = logs.log(beacon.epoch) else {
            return if beacon.epoch > active.epoch() {
                MonitorEvent::EpochSkew {
                    beacon_epoch: beacon.epoch,
                    log_epoch: active.epoch(),
                }
            } else {
                MonitorEvent::Stale
            };
        };
        if log.epoch() < active.epoch() {
            return MonitorEvent::Stale;
        }
        match monitor_check(beacon, log) {
            CheckResult::Ok => MonitorEvent::Ok,
            CheckResult::Mismatch => MonitorEvent::Alarm(self.alarm(beacon, emitted_at, now, log)),
            CheckResult::BeaconAhead => {
                let recheck_at = now + self.grace_us;
                self.pending.push_back(Pending {
                    beacon: beacon.clone(),
                    emitted_at,
                    recheck_at,
                });
                MonitorEvent::Deferred { recheck_at }
            }
            CheckResult::EpochSkew {
                beacon_epoch,
                log_epoch,
            } => MonitorEvent::EpochSkew {
                beacon_epoch,
                log_epoch,
            },
        }
    }

    /// Re-examines deferred beacons whose grace has expired.
    pub fn recheck(&mut self, now: SimTime, logs: &LogServer) -> Vec<MismatchAlarm> {
        let mut alarms = Vec::new();
        while self.pending.front().is_some_and(|p| p.recheck_at <= now) {
            let p = self.pending.pop_front().unwrap();
            if self.alarmed(p.beacon.epoch) {
                continue;
            }
            let Some(log) = logs.log(p.beacon.epoch) else {
                continue;
            };
            if monitor_check(&p.beacon, log) != CheckResult::Ok {
                alarms.push(self.alarm(&p.beacon, p.emitted_at, now, log));
            }
        }
        alarms
    }
}
