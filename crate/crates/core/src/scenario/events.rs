//! Event stream and run metrics.

use serde::{Deserialize, Serialize};

use crate::accumulator::Digest;
use crate::link::{Direction, MessageKind};

/// One line of the event stream. Serialized as
/// `{"time":…,"actor":…,"kind":…,"detail":{…}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    /// Seconds since the start of the run.
    pub time: f64,
    pub actor: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum EventKind {
    FrameTx {
        direction: Direction,
        message: MessageKind,
        message_id: u16,
        frame_index: u8,
        total_frames: u8,
        start: f64,
        end: f64,
        /// Lowercase hex of the encoded frame.
        hex: String,
    },
    FrameRx {
        direction: Direction,
        receiver: String,
        message_id: u16,
        frame_index: u8,
    },
    FrameDropped {
        direction: Direction,
        receiver: String,
        message_id: u16,
        frame_index: u8,
        reason: String,
    },
    RequestSent {
        request: usize,
        request_id: String,
        attempt: u32,
        epoch: u64,
        bytes: usize,
    },
    UplinkDropped {
        reason: String,
    },
    CertSigned {
        epoch: u64,
        leaf_index: u64,
        request_id: String,
        faulty_attempts: u32,
    },
    CertReplayed {
        epoch: u64,
        leaf_index: u64,
        request_id: String,
    },
    ResponseReceived {
        request: usize,
        epoch: u64,
        leaf_index: u64,
        latency_s: f64,
    },
    RequestRetry {
        request: usize,
        attempt: u32,
    },
    RequestAbandoned {
        request: usize,
    },
    SubmissionSuppressed {
        request: usize,
        epoch: u64,
        leaf_index: u64,
    },
    CertLogged {
        epoch: u64,
        leaf_index: u64,
        log_size: u64,
    },
    LogHeld {
        epoch: u64,
        leaf_index: u64,
    },
    LogRejected {
        epoch: u64,
        leaf_index: u64,
        reason: String,
    },
    Beacon {
        epoch: u64,
        sequence: u64,
        log_size: u64,
        root: Digest,
    },
    BeaconRejected {
        station: String,
    },
    Consensus {
        key_fingerprint: String,
        stations: usize,
    },
    ConsensusConflict {
        keys: usize,
    },
    Alarm {
        epoch: u64,
        beacon_sequence: u64,
        beacon_log_size: u64,
        local_log_size: u64,
        beacon_root: Digest,
        log_root: Digest,
        time_to_detection_s: f64,
    },
    EpochSkew {
        beacon_epoch: u64,
        log_epoch: u64,
    },
    Reset {
        new_epoch: u64,
        frozen_epoch: u64,
    },
    EpochTransition {
        from: u64,
        to: u64,
    },
    FaultDetected {
        attempts: u32,
        released: bool,
    },
    Brownout {
        charge_wh: f64,
    },
    BatteryTelemetry {
        orbit: u64,
        min_charge_wh: f64,
        dod_percent: f64,
    },
    Adversary {
        action: String,
        detail: String,
    },
    Attestation {
        attester: String,
        attested: String,
        verified: bool,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::FrameTx { .. } => "frame_tx",
            EventKind::FrameRx { .. } => "frame_rx",
            EventKind::FrameDropped { .. } => "frame_dropped",
            EventKind::RequestSent { .. } => "request_sent",
            EventKind::UplinkDropped { .. } => "uplink_dropped",
            EventKind::CertSigned { .. } => "cert_signed",
            EventKind::CertReplayed { .. } => "cert_replayed",
            EventKind::ResponseReceived { .. } => "response_received",
            EventKind::RequestRetry { .. } => "request_retry",
            EventKind::RequestAbandoned { .. } => "request_abandoned",
            EventKind::SubmissionSuppressed { .. } => "submission_suppressed",
            EventKind::CertLogged { .. } => "cert_logged",
            EventKind::LogHeld { .. } => "log_held",
            EventKind::LogRejected { .. } => "log_rejected",
            EventKind::Beacon { .. } => "beacon",
            EventKind::BeaconRejected { .. } => "beacon_rejected",
            EventKind::Consensus { .. } => "consensus",
            EventKind::ConsensusConflict { .. } => "consensus_conflict",
            EventKind::Alarm { .. } => "alarm",
            EventKind::EpochSkew { .. } => "epoch_skew",
            EventKind::Reset { .. } => "reset",
            EventKind::EpochTransition { .. } => "epoch_transition",
            EventKind::FaultDetected { .. } => "fault_detected",
            EventKind::Brownout { .. } => "brownout",
            EventKind::BatteryTelemetry { .. } => "battery_telemetry",
            EventKind::Adversary { .. } => "adversary",
            EventKind::Attestation { .. } => "attestation",
        }
    }
}

/// Newline-delimited JSON, one event per line.
pub fn events_to_jsonl(events: &[SimEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub certs_signed: u64,
    pub certs_logged: u64,
    /// Honest submissions dropped by the adversary.
    pub certs_suppressed: u64,
    /// Signed for forged requests; never submitted.
    pub certs_forged: u64,
    /// Refused by the log, e.g. arriving after their epoch was frozen.
    pub certs_rejected: u64,
    /// Signed but neither logged, suppressed, forged nor rejected by the end.
    pub certs_in_flight: u64,
    pub requests_scheduled: u64,
    pub requests_completed: u64,
    pub requests_abandoned: u64,
    pub requests_completed_per_pass: Vec<u64>,
    pub analytic_capacity: u64,
    pub alarms: u64,
    pub time_to_detection_s: Vec<f64>,
    pub resets: u64,
    pub epoch_transitions: u64,
    pub final_epoch: u64,
    pub faults_detected: u64,
    pub signing_aborted: u64,
    pub uplink_airtime_s: f64,
    pub downlink_airtime_s: f64,
    pub frames_lost: u64,
    pub consensus_at_s: Option<f64>,
    pub max_dod_percent: f64,
    pub brownout: bool,
}
