//! Single-threaded discrete-event engine.
//!
//! Every action is keyed by `(time, actor rank, insertion sequence)` in a
//! `BTreeMap`, so two runs of the same configuration process actions in the
//! same order and produce identical event streams. Randomness comes from
//! ChaCha streams seeded with `SHA-256(seed || label)`, one per consumer.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use super::config::{AdversaryAction, ConfigError, ScenarioConfig, ScheduledRequest};
use super::events::{EventKind, Metrics, SimEvent};
use super::{analytic_capacity, RESPONSE_LEN};
use crate::crypto::{ChannelKey, PrgState, PublicKey, ENVELOPE_OVERHEAD};
use crate::ground::{
    build_request, consensus_bootstrap, open_response, reset_procedure, BeaconObservation,
    Consensus, LogServer, MismatchAlarm, Monitor, MonitorEvent, OfflineVault, SubmitOutcome,
};
use crate::hsm::{
    BeaconMessage, CsrMessage, HsmConfig, HsmState, RequestId, SignedCertificate, UplinkError,
};
use crate::link::frame::{address, fragment_addressed, ground_address, satellite_address};
use crate::link::{
    message_airtime_us, ChannelTap, Direction, Fate, LinkChannel, MessageKind, Reassembler,
    TapMode, Transmission, Visibility,
};
use crate::power::PowerModel;
use crate::time::{secs_to_us, SimTime, MICROS_PER_SEC};

const ADVERSARY: &str = "adversary";

fn label_seed(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Rx {
    Hsm,
    Station(usize),
    Adversary,
}

#[derive(Debug)]
enum Action {
    Beacon,
    DownlinkPump,
    FrameArrive { rx: Rx, encoded: Vec<u8> },
    RequestDue(usize),
    StationUplink,
    ResponseTimeout { request: usize, attempt: u32 },
    LogSubmit(Box<SignedCertificate>),
    MonitorRecheck,
    Reset,
    Adversary(usize),
    FaultWindow { rate: f64, start: bool },
    PowerTick,
    PeerContact,
}

const RANK_HSM: u32 = 0;
const RANK_STATION: u32 = 1;
const RANK_LOG: u32 = 10_000;
const RANK_MONITOR: u32 = 10_001;
const RANK_OPS: u32 = 10_002;
const RANK_ADVERSARY: u32 = 10_003;
const RANK_POWER: u32 = 10_004;
const RANK_PEER: u32 = 10_005;

impl Action {
    fn rank(&self) -> u32 {
        match self {
            Action::Beacon | Action::DownlinkPump | Action::FaultWindow { .. } => RANK_HSM,
            Action::FrameArrive { rx, .. } => match rx {
                Rx::Hsm => RANK_HSM,
                Rx::Station(i) => RANK_STATION + *i as u32,
                Rx::Adversary => RANK_ADVERSARY,
            },
            Action::RequestDue(_) | Action::StationUplink | Action::ResponseTimeout { .. } => {
                RANK_STATION
            }
            Action::LogSubmit(_) => RANK_LOG,
            Action::MonitorRecheck => RANK_MONITOR,
            Action::Reset => RANK_OPS,
            Action::Adversary(_) => RANK_ADVERSARY,
            Action::PowerTick => RANK_POWER,
            Action::PeerContact => RANK_PEER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    time: SimTime,
    rank: u32,
    seq: u64,
}

/// Where a certificate ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CertFate {
    InFlight,
    Logged,
    Suppressed,
    Forged,
    Rejected,
}

#[derive(Debug, Clone)]
pub struct CertRecord {
    pub certificate: SignedCertificate,
    pub fate: CertFate,
    /// Workload request index; `None` for forged requests.
    pub request: Option<usize>,
    pub signed_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
enum RequestState {
    Waiting,
    Queued,
    InFlight { attempt: u32 },
    Done,
    Abandoned,
}

#[derive(Debug, Clone)]
struct Request {
    plan: ScheduledRequest,
    request_id: RequestId,
    csr: Option<CsrMessage>,
    attempts: u32,
    first_sent: Option<SimTime>,
    state: RequestState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    AllStations,
    Primary { deadline: SimTime },
}

#[derive(Debug)]
struct OutMsg {
    kind: MessageKind,
    payload: Vec<u8>,
    target: Target,
    beacon_sequence: Option<u64>,
}

struct Station {
    id: String,
    visibility: Visibility,
    reassembler: Reassembler,
}

struct AdversaryState {
    stolen: Option<ChannelKey>,
    reassembler: Reassembler,
    forged_ids: BTreeSet<RequestId>,
    forged_count: u32,
    rng: ChaCha8Rng,
    spoof: Option<HsmState>,
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub events: Vec<SimEvent>,
    pub metrics: Metrics,
    /// Engine invariants found broken; empty for a sound run.
    pub violations: Vec<String>,
    /// Terrestrial logs; `None` if consensus was never reached.
    pub logs: Option<LogServer>,
    pub hsm: HsmState,
    pub certificates: Vec<CertRecord>,
}

impl RunOutput {
    pub fn events_jsonl(&self) -> String {
        super::events::events_to_jsonl(&self.events)
    }
}

pub struct Engine {
    config: ScenarioConfig,
    requests: Vec<Request>,
    now: SimTime,
    end: SimTime,
    queue: BTreeMap<Key, Action>,
    seq: u64,
    events: Vec<SimEvent>,
    metrics: Metrics,
    violations: Vec<String>,

    hsm: HsmState,
    hsm_alive: bool,
    hsm_reassembler: Reassembler,
    initial_beacon: Option<BeaconMessage>,
    base_fault_rate: f64,
    uplink: LinkChannel,
    downlink: LinkChannel,
    downlink_queue: VecDeque<OutMsg>,
    pump_at: Option<SimTime>,
    downlink_msg_id: u16,
    downlink_spans: Vec<(u64, u64)>,
    beacon_emitted: BTreeMap<u64, SimTime>,

    stations: Vec<Station>,
    always: Visibility,
    uplink_queue: VecDeque<usize>,
    uplink_at: Option<SimTime>,
    uplink_msg_id: u16,
    by_request_id: BTreeMap<RequestId, usize>,
    suppressed: BTreeSet<usize>,

    ground_key: ChannelKey,
    vault: Option<OfflineVault>,
    logs: Option<LogServer>,
    monitor: Monitor,
    trusted: Option<PublicKey>,
    observations: Vec<BeaconObservation>,
    conflict_reported: bool,
    reset_scheduled: bool,

    adversary: AdversaryState,
    certs: BTreeMap<(u64, u64), CertRecord>,
    power: PowerModel,
    peer: Option<HsmState>,
    capacity: u64,
}

impl Engine {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let seed = config.seed;
        let hsm_config = HsmConfig {
            ..config.hsm.clone()
        };
        let initial_ratchet = PrgState::from_seed(label_seed(seed, "channel-ratchet"));
        let (hsm, beacon) = HsmState::bootstrap(
            &label_seed(seed, "hsm-entropy"),
            initial_ratchet.clone(),
            &hsm_config,
        );
        let ground_key = initial_ratchet.key();
        let stations: Vec<Station> = config
            .stations
            .iter()
            .map(|s| Station {
                id: s.id.clone(),
                visibility: config.link.visibility(s.pass_offset_s),
                reassembler: Reassembler::new(),
            })
            .collect();
        let mut uplink =
            LinkChannel::new(&config.link, Direction::Up, label_seed(seed, "uplink-loss"));
        let mut downlink = LinkChannel::new(
            &config.link,
            Direction::Down,
            label_seed(seed, "downlink-loss"),
        );
        if !config.adversary.is_empty() {
            for ch in [&mut uplink, &mut downlink] {
                ch.register_tap(
                    ChannelTap {
                        mode: TapMode::Inject,
                        owner: ADVERSARY.into(),
                    },
                    Box::new(|_, _| false),
                );
            }
        }
        let suppressed = config
            .adversary
            .iter()
            .filter_map(|a| match a {
                AdversaryAction::SuppressLogSubmission { request } => Some(*request),
                _ => None,
            })
            .collect();
        let requests = config
            .requests()
            .into_iter()
            .map(|plan| {
                let mut h = Sha256::new();
                h.update(label_seed(seed, "request-id"));
                h.update((plan.index as u64).to_be_bytes());
                let digest = h.finalize();
                Request {
                    plan,
                    request_id: digest[..16].try_into().unwrap(),
                    csr: None,
                    attempts: 0,
                    first_sent: None,
                    state: RequestState::Waiting,
                }
            })
            .collect::<Vec<_>>();
        let min_csr = requests
            .iter()
            .map(|r| r.plan.csr_bytes)
            .min()
            .unwrap_or(CsrMessage::DEFAULT_TOTAL_LEN);
        let by_request_id = requests
            .iter()
            .map(|r| (r.request_id, r.plan.index))
            .collect();
        let forever = u64::MAX / 4;
        let end = SimTime(config.duration_s * MICROS_PER_SEC);
        let monitor = Monitor::new(secs_to_us(config.monitor_grace_s()));
        let mut engine = Self {
            capacity: analytic_capacity(&config.link, min_csr),
            requests,
            now: SimTime::ZERO,
            end,
            queue: BTreeMap::new(),
            seq: 0,
            events: Vec::new(),
            metrics: Metrics::default(),
            violations: Vec::new(),
            base_fault_rate: config.hsm.fault_rate,
            hsm,
            hsm_alive: true,
            hsm_reassembler: Reassembler::new(),
            initial_beacon: Some(beacon),
            uplink,
            downlink,
            downlink_queue: VecDeque::new(),
            pump_at: None,
            downlink_msg_id: 0,
            downlink_spans: Vec::new(),
            beacon_emitted: BTreeMap::new(),
            stations,
            always: Visibility {
                period_us: forever,
                duration_us: forever,
                offset_us: 0,
            },
            uplink_queue: VecDeque::new(),
            uplink_at: None,
            uplink_msg_id: 0,
            by_request_id,
            suppressed,
            ground_key,
            vault: Some(OfflineVault::seal(initial_ratchet)),
            logs: None,
            monitor,
            trusted: None,
            observations: Vec::new(),
            conflict_reported: false,
            reset_scheduled: false,
            adversary: AdversaryState {
                stolen: None,
                reassembler: Reassembler::new(),
                forged_ids: BTreeSet::new(),
                forged_count: 0,
                rng: ChaCha8Rng::from_seed(label_seed(seed, "adversary")),
                spoof: None,
            },
            certs: BTreeMap::new(),
            power: PowerModel::new(config.power.clone()),
            peer: None,
            config,
        };
        engine.seed_actions();
        Ok(engine)
    }

    fn seed_actions(&mut self) {
        self.schedule(SimTime::ZERO, Action::Beacon);
        for i in 0..self.requests.len() {
            let t = SimTime::from_secs(self.requests[i].plan.at_s);
            self.schedule(t, Action::RequestDue(i));
        }
        for i in 0..self.config.adversary.len() {
            match self.config.adversary[i].clone() {
                AdversaryAction::StealKey { at_s }
                | AdversaryAction::ForgeRequest { at_s, .. }
                | AdversaryAction::SpoofBeacon { at_s, .. } => {
                    self.schedule(SimTime::from_secs(at_s), Action::Adversary(i));
                }
                AdversaryAction::InjectFaults { rate, from_s, to_s } => {
                    self.schedule(
                        SimTime::from_secs(from_s),
                        Action::FaultWindow { rate, start: true },
                    );
                    let base = self.base_fault_rate;
                    self.schedule(
                        SimTime::from_secs(to_s),
                        Action::FaultWindow {
                            rate: base,
                            start: false,
                        },
                    );
                }
                AdversaryAction::SuppressLogSubmission { .. } => {}
            }
        }
        for c in self.config.peer_contacts.clone() {
            self.schedule(SimTime::from_secs(c.at_s), Action::PeerContact);
        }
        let first = SimTime::from_secs(self.config.power.daylight_s);
        self.schedule(first, Action::PowerTick);
    }

    fn schedule(&mut self, time: SimTime, action: Action) {
        let key = Key {
            time,
            rank: action.rank(),
            seq: self.seq,
        };
        self.seq += 1;
        self.queue.insert(key, action);
    }

    fn emit(&mut self, actor: &str, kind: EventKind) {
        self.events.push(SimEvent {
            time: self.now.as_secs(),
            actor: actor.to_string(),
            kind,
        });
    }

    fn station_actor(&self, i: usize) -> String {
        format!("station:{}", self.stations[i].id)
    }

    fn rx_name(&self, rx: Rx) -> String {
        match rx {
            Rx::Hsm => "hsm".into(),
            Rx::Station(i) => self.station_actor(i),
            Rx::Adversary => ADVERSARY.into(),
        }
    }

    pub fn run(mut self) -> RunOutput {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().time > self.end {
                break;
            }
            let (key, action) = entry.remove_entry();
            self.now = key.time;
            self.handle(action);
        }
        self.now = self.end;
        self.finish()
    }

    fn handle(&mut self, action: Action) {
        match action {
            Action::Beacon => self.on_beacon_tick(),
            Action::DownlinkPump => self.on_pump(),
            Action::FrameArrive { rx, encoded } => self.on_frame(rx, encoded),
            Action::RequestDue(i) => {
                self.requests[i].state = RequestState::Queued;
                self.uplink_queue.push_back(i);
                self.kick_uplink(self.now);
            }
            Action::StationUplink => self.on_uplink(),
            Action::ResponseTimeout { request, attempt } => self.on_timeout(request, attempt),
            Action::LogSubmit(cert) => self.on_log_submit(*cert),
            Action::MonitorRecheck => self.on_recheck(),
            Action::Reset => self.on_reset(),
            Action::Adversary(i) => self.on_adversary(i),
            Action::FaultWindow { rate, start } => {
                self.hsm.fault_rate = rate;
                let action = if start {
                    "inject_faults_start"
                } else {
                    "inject_faults_end"
                };
                self.emit(
                    ADVERSARY,
                    EventKind::Adversary {
                        action: action.into(),
                        detail: format!("fault rate {rate}"),
                    },
                );
            }
            Action::PowerTick => self.on_power_tick(),
            Action::PeerContact => self.on_peer_contact(),
        }
    }

    // ---- satellite ----

    fn any_station_visible(&self) -> bool {
        self.stations.iter().any(|s| s.visibility.visible(self.now))
    }

    fn on_beacon_tick(&mut self) {
        if !self.hsm_alive {
            return;
        }
        if !self.any_station_visible() {
            let next = self
                .stations
                .iter()
                .map(|s| s.visibility.next_pass_start(self.now))
                .min()
                .unwrap();
            self.schedule(next, Action::Beacon);
            return;
        }
        let beacon = match self.initial_beacon.take() {
            Some(b) => b,
            None => self.hsm.make_beacon(),
        };
        self.emit(
            "hsm",
            EventKind::Beacon {
                epoch: beacon.epoch,
                sequence: beacon.sequence,
                log_size: beacon.log_size,
                root: beacon.accumulator_root,
            },
        );
        self.downlink_queue.push_back(OutMsg {
            kind: MessageKind::Beacon,
            payload: beacon.encode(),
            target: Target::AllStations,
            beacon_sequence: Some(beacon.sequence),
        });
        self.kick_pump();
        let next = self.now + secs_to_us(self.config.beacon_period_s);
        self.schedule(next, Action::Beacon);
    }

    fn kick_pump(&mut self) {
        let at = self.now.max(self.downlink.busy_until());
        if self.pump_at.is_none_or(|t| t > at) {
            self.pump_at = Some(at);
            self.schedule(at, Action::DownlinkPump);
        }
    }

    fn downlink_receivers(&self) -> Vec<Visibility> {
        let mut v: Vec<Visibility> = self.stations.iter().map(|s| s.visibility).collect();
        v.push(self.always);
        v
    }

    fn on_pump(&mut self) {
        if self.pump_at != Some(self.now) {
            return;
        }
        self.pump_at = None;
        if !self.hsm_alive {
            self.downlink_queue.clear();
            return;
        }
        if self.downlink.busy_until() > self.now {
            self.kick_pump();
            return;
        }
        while let Some(msg) = self.downlink_queue.pop_front() {
            let frames = {
                let dest = match msg.target {
                    Target::AllStations => address("CQ", 0, false),
                    Target::Primary { .. } => ground_address(),
                };
                self.downlink_msg_id = self.downlink_msg_id.wrapping_add(1);
                fragment_addressed(
                    &msg.payload,
                    msg.kind,
                    self.downlink_msg_id,
                    dest,
                    satellite_address(),
                )
                .expect("downlink payloads fit the frame counter")
            };
            let first_len = frames[0].encoded_len();
            let start = self.downlink.next_slot(self.now, first_len);
            let est_end = start + message_airtime_us(msg.payload.len(), self.downlink.bps());
            let fits = match msg.target {
                Target::AllStations => self
                    .stations
                    .iter()
                    .any(|s| s.visibility.covers(start, est_end)),
                Target::Primary { deadline } => {
                    est_end <= deadline && self.stations[0].visibility.covers(start, est_end)
                }
            };
            if !fits {
                continue;
            }
            let tx = self
                .downlink
                .transmit(&frames, self.now, &self.downlink_receivers());
            if let Some(seq) = msg.beacon_sequence {
                self.beacon_emitted.insert(seq, tx.frames[0].start);
            }
            for f in &tx.frames {
                self.downlink_spans.push((f.start.0, f.end.0));
            }
            let mut rx: Vec<Rx> = (0..self.stations.len()).map(Rx::Station).collect();
            rx.push(Rx::Adversary);
            self.dispatch("hsm", Direction::Down, &tx, &rx);
            break;
        }
        if !self.downlink_queue.is_empty() {
            self.kick_pump();
        }
    }

    fn dispatch(&mut self, actor: &str, direction: Direction, tx: &Transmission, receivers: &[Rx]) {
        for f in &tx.frames {
            let header = f.frame.header().expect("own frames carry headers");
            self.emit(
                actor,
                EventKind::FrameTx {
                    direction,
                    message: header.kind,
                    message_id: header.message_id,
                    frame_index: header.frame_index,
                    total_frames: header.total_frames,
                    start: f.start.as_secs(),
                    end: f.end.as_secs(),
                    hex: hex::encode(&f.encoded),
                },
            );
            for (fate, &rx) in f.fates.iter().zip(receivers) {
                match fate {
                    Fate::Arrived => self.schedule(
                        f.end,
                        Action::FrameArrive {
                            rx,
                            encoded: f.encoded.clone(),
                        },
                    ),
                    Fate::Lost | Fate::Suppressed(_) => {
                        self.metrics.frames_lost += 1;
                        let reason = match fate {
                            Fate::Lost => "lost".to_string(),
                            Fate::Suppressed(by) => format!("suppressed by {by}"),
                            _ => unreachable!(),
                        };
                        let receiver = self.rx_name(rx);
                        self.emit(
                            actor,
                            EventKind::FrameDropped {
                                direction,
                                receiver,
                                message_id: header.message_id,
                                frame_index: header.frame_index,
                                reason,
                            },
                        );
                    }
                    Fate::OutOfPass => {}
                }
            }
        }
    }

    fn on_frame(&mut self, rx: Rx, encoded: Vec<u8>) {
        let reassembler = match rx {
            Rx::Hsm => &mut self.hsm_reassembler,
            Rx::Station(i) => &mut self.stations[i].reassembler,
            Rx::Adversary => &mut self.adversary.reassembler,
        };
        let before = reassembler.discarded;
        let message = reassembler.push(&encoded);
        let discarded = reassembler.discarded > before;
        // The adversary listens silently.
        if !discarded && rx != Rx::Adversary {
            if let Ok(frame) = crate::link::Ax25Frame::decode(&encoded) {
                let h = frame.header().expect("accepted frames have headers");
                let receiver = self.rx_name(rx);
                let direction = if rx == Rx::Hsm {
                    Direction::Up
                } else {
                    Direction::Down
                };
                self.emit(
                    &receiver.clone(),
                    EventKind::FrameRx {
                        direction,
                        receiver,
                        message_id: h.message_id,
                        frame_index: h.frame_index,
                    },
                );
            }
        }
        let Some(message) = message else { return };
        match (rx, message.kind) {
            (Rx::Hsm, MessageKind::Request) => self.on_uplink_message(&message.payload),
            (Rx::Station(i), MessageKind::Beacon) => {
                if let Ok(beacon) = BeaconMessage::decode(&message.payload) {
                    self.on_station_beacon(i, beacon);
                }
            }
            (Rx::Station(0), MessageKind::Response) => self.on_response(&message.payload),
            (Rx::Station(i), MessageKind::Certificate) => {
                if let Ok(cert) = SignedCertificate::decode(&message.payload) {
                    self.on_broadcast_certificate(i, cert);
                }
            }
            (Rx::Adversary, MessageKind::Response) => {
                if let Some(key) = &self.adversary.stolen {
                    if open_response(key, &message.payload).is_ok() {
                        self.emit(
                            ADVERSARY,
                            EventKind::Adversary {
                                action: "certificate_obtained".into(),
                                detail: String::new(),
                            },
                        );
                    }
                }
            }
            _ => {}
        }
    }

    fn on_uplink_message(&mut self, payload: &[u8]) {
        if !self.hsm_alive {
            return;
        }
        let from = self.hsm.epoch();
        match self.hsm.process_uplink(payload) {
            Err(UplinkError::Decrypt(_)) => self.emit(
                "hsm",
                EventKind::UplinkDropped {
                    reason: "no channel key opens the request".into(),
                },
            ),
            Err(UplinkError::MalformedCsr {
                epoch_advanced,
                error,
            }) => {
                self.note_transition(epoch_advanced, from);
                self.emit(
                    "hsm",
                    EventKind::UplinkDropped {
                        reason: format!("malformed request: {error}"),
                    },
                );
            }
            Err(UplinkError::Fault {
                epoch_advanced,
                attempts,
            }) => {
                self.note_transition(epoch_advanced, from);
                self.metrics.faults_detected += attempts as u64;
                self.metrics.signing_aborted += 1;
                self.emit(
                    "hsm",
                    EventKind::FaultDetected {
                        attempts,
                        released: false,
                    },
                );
            }
            Ok(reply) => {
                self.note_transition(reply.epoch_advanced, from);
                let cert = reply.certificate;
                if reply.faulty_attempts > 0 {
                    self.metrics.faults_detected += reply.faulty_attempts as u64;
                    self.emit(
                        "hsm",
                        EventKind::FaultDetected {
                            attempts: reply.faulty_attempts,
                            released: true,
                        },
                    );
                }
                let request_id = hex::encode(cert.csr.request_id);
                if reply.replayed {
                    self.emit(
                        "hsm",
                        EventKind::CertReplayed {
                            epoch: cert.signer_epoch,
                            leaf_index: cert.leaf_index,
                            request_id,
                        },
                    );
                } else {
                    if !cert.verify(self.hsm.public_key()) {
                        self.violations.push(format!(
                            "released certificate {}/{} fails verification",
                            cert.signer_epoch, cert.leaf_index
                        ));
                    }
                    self.metrics.certs_signed += 1;
                    let forged = self.adversary.forged_ids.contains(&cert.csr.request_id);
                    self.certs.insert(
                        (cert.signer_epoch, cert.leaf_index),
                        CertRecord {
                            certificate: cert.clone(),
                            fate: if forged {
                                CertFate::Forged
                            } else {
                                CertFate::InFlight
                            },
                            request: self.by_request_id.get(&cert.csr.request_id).copied(),
                            signed_at: self.now,
                        },
                    );
                    self.emit(
                        "hsm",
                        EventKind::CertSigned {
                            epoch: cert.signer_epoch,
                            leaf_index: cert.leaf_index,
                            request_id,
                            faulty_attempts: reply.faulty_attempts,
                        },
                    );
                }
                let msg = if self.config.broadcast_certificates {
                    OutMsg {
                        kind: MessageKind::Certificate,
                        payload: cert.encode(),
                        target: Target::AllStations,
                        beacon_sequence: None,
                    }
                } else {
                    let deadline = self.stations[0]
                        .visibility
                        .pass_end(self.now)
                        .unwrap_or(self.now);
                    OutMsg {
                        kind: MessageKind::Response,
                        payload: reply.response,
                        target: Target::Primary { deadline },
                        beacon_sequence: None,
                    }
                };
                self.downlink_queue.push_back(msg);
                self.kick_pump();
            }
        }
    }

    fn note_transition(&mut self, advanced: bool, from: u64) {
        if advanced {
            self.metrics.epoch_transitions += 1;
            let to = self.hsm.epoch();
            self.emit("hsm", EventKind::EpochTransition { from, to });
        }
    }

    // ---- ground stations ----

    fn on_station_beacon(&mut self, i: usize, beacon: BeaconMessage) {
        let actor = self.station_actor(i);
        if self.trusted.is_none() {
            self.observations.push(BeaconObservation {
                station_id: self.stations[i].id.clone(),
                beacon: beacon.clone(),
                received_at: self.now,
            });
            let window = secs_to_us(self.config.consensus_window_s);
            match consensus_bootstrap(&self.observations, self.config.consensus_threshold, window) {
                Ok(Consensus::Online(key)) => {
                    let agreeing = self
                        .observations
                        .iter()
                        .filter(|o| o.beacon.public_key == key)
                        .map(|o| o.station_id.as_str())
                        .collect::<BTreeSet<_>>()
                        .len();
                    self.emit(
                        &actor,
                        EventKind::Consensus {
                            key_fingerprint: key.fingerprint(),
                            stations: agreeing,
                        },
                    );
                    self.metrics.consensus_at_s = Some(self.now.as_secs());
                    self.logs = Some(LogServer::new(key.clone(), self.ground_key.epoch));
                    self.trusted = Some(key);
                    self.kick_uplink(self.now);
                }
                Ok(Consensus::Pending) => return,
                Err(conflict) => {
                    if !self.conflict_reported {
                        self.conflict_reported = true;
                        self.emit(
                            &actor,
                            EventKind::ConsensusConflict {
                                keys: conflict.keys.len(),
                            },
                        );
                    }
                    return;
                }
            }
        }
        let trusted = self.trusted.as_ref().unwrap();
        if !beacon.verify_with(trusted) {
            self.emit(
                &actor,
                EventKind::BeaconRejected {
                    station: self.stations[i].id.clone(),
                },
            );
            return;
        }
        let emitted = self
            .beacon_emitted
            .get(&beacon.sequence)
            .copied()
            .unwrap_or(self.now);
        let logs = self.logs.as_ref().unwrap();
        match self.monitor.observe(&beacon, emitted, self.now, logs) {
            MonitorEvent::Deferred { recheck_at } => {
                self.schedule(recheck_at, Action::MonitorRecheck)
            }
            MonitorEvent::Alarm(alarm) => self.raise_alarm(alarm),
            MonitorEvent::EpochSkew {
                beacon_epoch,
                log_epoch,
            } => {
                self.emit(
                    "monitor",
                    EventKind::EpochSkew {
                        beacon_epoch,
                        log_epoch,
                    },
                );
                self.schedule_reset();
            }
            MonitorEvent::Ok | MonitorEvent::Stale | MonitorEvent::Ignored => {}
        }
    }

    fn kick_uplink(&mut self, at: SimTime) {
        let at = at.max(self.now);
        if self.uplink_at.is_none_or(|t| t > at) {
            self.uplink_at = Some(at);
            self.schedule(at, Action::StationUplink);
        }
    }

    fn on_uplink(&mut self) {
        if self.uplink_at != Some(self.now) {
            return;
        }
        self.uplink_at = None;
        if self.trusted.is_none() {
            return;
        }
        let Some(&idx) = self.uplink_queue.front() else {
            return;
        };
        if self.uplink.busy_until() > self.now {
            self.kick_uplink(self.uplink.busy_until());
            return;
        }
        let vis = self.stations[0].visibility;
        let wire_len = self.requests[idx].plan.csr_bytes + ENVELOPE_OVERHEAD;
        let response_len = if self.config.broadcast_certificates {
            self.requests[idx].plan.csr_bytes + 4 + 8 + 8 + 2 + crate::crypto::SIGNATURE_LEN
        } else {
            RESPONSE_LEN
        };
        let needed = message_airtime_us(wire_len, self.uplink.bps())
            + message_airtime_us(response_len, self.downlink.bps());
        let fits = vis
            .pass_end(self.now)
            .is_some_and(|end| self.now + needed <= end);
        if !fits {
            let next = match vis.pass_end(self.now) {
                Some(end) => vis.next_pass_start(end),
                None => vis.next_pass_start(self.now),
            };
            self.kick_uplink(next);
            return;
        }
        self.uplink_queue.pop_front();

        let now = self.now;
        let key = self.ground_key.clone();
        let req = &mut self.requests[idx];
        let csr = req
            .csr
            .get_or_insert_with(|| {
                CsrMessage::padded(
                    req.request_id,
                    now.micros(),
                    b"CN=ground-request",
                    req.plan.csr_bytes,
                )
            })
            .clone();
        req.attempts += 1;
        req.first_sent.get_or_insert(now);
        let attempt = req.attempts;
        req.state = RequestState::InFlight { attempt };
        let mut nonce_seed = req.request_id.to_vec();
        nonce_seed.extend_from_slice(&attempt.to_be_bytes());
        nonce_seed.extend_from_slice(&key.epoch.to_be_bytes());
        let sealed = build_request(&csr, &key, &nonce_seed);
        let request_id = hex::encode(req.request_id);

        self.uplink_msg_id = self.uplink_msg_id.wrapping_add(1);
        let frames = fragment_addressed(
            &sealed,
            MessageKind::Request,
            self.uplink_msg_id,
            satellite_address(),
            ground_address(),
        )
        .expect("validated request size");
        let tx = self.uplink.transmit(&frames, now, &[vis]);
        let actor = self.station_actor(0);
        self.emit(
            &actor,
            EventKind::RequestSent {
                request: idx,
                request_id,
                attempt,
                epoch: key.epoch,
                bytes: sealed.len(),
            },
        );
        self.dispatch(&actor, Direction::Up, &tx, &[Rx::Hsm]);
        let end = tx.end().unwrap();
        self.schedule(
            end + secs_to_us(self.config.response_timeout_s),
            Action::ResponseTimeout {
                request: idx,
                attempt,
            },
        );
        self.kick_uplink(end);
    }

    fn on_timeout(&mut self, idx: usize, attempt: u32) {
        if self.requests[idx].state != (RequestState::InFlight { attempt }) {
            return;
        }
        let actor = self.station_actor(0);
        if attempt <= self.config.request_retries {
            self.requests[idx].state = RequestState::Queued;
            self.uplink_queue.push_front(idx);
            self.emit(
                &actor,
                EventKind::RequestRetry {
                    request: idx,
                    attempt: attempt + 1,
                },
            );
            self.kick_uplink(self.now);
        } else {
            self.requests[idx].state = RequestState::Abandoned;
            self.metrics.requests_abandoned += 1;
            self.emit(&actor, EventKind::RequestAbandoned { request: idx });
        }
    }

    fn on_response(&mut self, sealed: &[u8]) {
        let Ok(resp) = open_response(&self.ground_key, sealed) else {
            return;
        };
        let Some(&idx) = self.by_request_id.get(&resp.request_id) else {
            return;
        };
        let Some(csr) = self.requests[idx].csr.clone() else {
            return;
        };
        let cert = resp.into_certificate(csr);
        self.complete(idx, cert);
    }

    fn on_broadcast_certificate(&mut self, i: usize, cert: SignedCertificate) {
        let Some(trusted) = &self.trusted else { return };
        if !cert.verify(trusted) {
            return;
        }
        if i == 0 {
            if let Some(&idx) = self.by_request_id.get(&cert.csr.request_id) {
                if self.requests[idx].csr.as_ref() == Some(&cert.csr) {
                    self.complete(idx, cert);
                    return;
                }
            }
        }
        let at = self.now + secs_to_us(self.config.submit_latency_s);
        self.schedule(at, Action::LogSubmit(Box::new(cert)));
    }

    fn complete(&mut self, idx: usize, cert: SignedCertificate) {
        if !matches!(self.requests[idx].state, RequestState::InFlight { .. }) {
            return;
        }
        let Some(trusted) = &self.trusted else { return };
        if !cert.verify(trusted) {
            return;
        }
        self.requests[idx].state = RequestState::Done;
        self.metrics.requests_completed += 1;
        let pass = self.stations[0].visibility.orbit_index(self.now);
        if pass >= 0 {
            let pass = pass as usize;
            let per = &mut self.metrics.requests_completed_per_pass;
            if per.len() <= pass {
                per.resize(pass + 1, 0);
            }
            per[pass] += 1;
        }
        let latency = self.now - self.requests[idx].first_sent.unwrap_or(self.now);
        let actor = self.station_actor(0);
        self.emit(
            &actor,
            EventKind::ResponseReceived {
                request: idx,
                epoch: cert.signer_epoch,
                leaf_index: cert.leaf_index,
                latency_s: latency as f64 / MICROS_PER_SEC as f64,
            },
        );
        if self.suppressed.contains(&idx) {
            if let Some(rec) = self.certs.get_mut(&(cert.signer_epoch, cert.leaf_index)) {
                if rec.fate == CertFate::InFlight {
                    rec.fate = CertFate::Suppressed;
                }
            }
            self.emit(
                ADVERSARY,
                EventKind::SubmissionSuppressed {
                    request: idx,
                    epoch: cert.signer_epoch,
                    leaf_index: cert.leaf_index,
                },
            );
            return;
        }
        let at = self.now + secs_to_us(self.config.submit_latency_s);
        self.schedule(at, Action::LogSubmit(Box::new(cert)));
    }

    // ---- log, monitor, operations ----

    fn on_log_submit(&mut self, cert: SignedCertificate) {
        let Some(logs) = self.logs.as_mut() else {
            return;
        };
        let epoch = cert.signer_epoch;
        let before = logs.log(epoch).map_or(0, |l| l.len());
        match logs.submit(&cert) {
            Ok(SubmitOutcome::Appended { count }) => {
                let size = before + count;
                for leaf_index in before..size {
                    if let Some(rec) = self.certs.get_mut(&(epoch, leaf_index)) {
                        rec.fate = CertFate::Logged;
                    }
                    self.emit(
                        "log",
                        EventKind::CertLogged {
                            epoch,
                            leaf_index,
                            log_size: leaf_index + 1,
                        },
                    );
                }
            }
            Ok(SubmitOutcome::Held) => self.emit(
                "log",
                EventKind::LogHeld {
                    epoch,
                    leaf_index: cert.leaf_index,
                },
            ),
            Ok(SubmitOutcome::Duplicate) => {}
            Err(e) => {
                if let Some(rec) = self.certs.get_mut(&(epoch, cert.leaf_index)) {
                    if rec.fate != CertFate::Logged {
                        rec.fate = CertFate::Rejected;
                    }
                }
                self.emit(
                    "log",
                    EventKind::LogRejected {
                        epoch,
                        leaf_index: cert.leaf_index,
                        reason: e.to_string(),
                    },
                );
            }
        }
    }

    fn on_recheck(&mut self) {
        let Some(logs) = self.logs.as_ref() else {
            return;
        };
        for alarm in self.monitor.recheck(self.now, logs) {
            self.raise_alarm(alarm);
        }
    }

    fn raise_alarm(&mut self, alarm: MismatchAlarm) {
        let ttd = alarm.time_to_detection_us() as f64 / MICROS_PER_SEC as f64;
        self.metrics.alarms += 1;
        self.metrics.time_to_detection_s.push(ttd);
        self.emit(
            "monitor",
            EventKind::Alarm {
                epoch: alarm.epoch,
                beacon_sequence: alarm.beacon_sequence,
                beacon_log_size: alarm.beacon_log_size,
                local_log_size: alarm.local_log_size,
                beacon_root: alarm.beacon_root,
                log_root: alarm.log_root,
                time_to_detection_s: ttd,
            },
        );
        self.schedule_reset();
    }

    fn schedule_reset(&mut self) {
        if !self.reset_scheduled {
            self.reset_scheduled = true;
            let at = self.now + secs_to_us(self.config.reset_delay_s);
            self.schedule(at, Action::Reset);
        }
    }

    fn on_reset(&mut self) {
        self.reset_scheduled = false;
        let (Some(vault), Some(logs)) = (self.vault.take(), self.logs.as_mut()) else {
            return;
        };
        let frozen_epoch = logs.active_epoch();
        let (key, vault) = reset_procedure(vault, logs);
        self.vault = Some(vault);
        self.ground_key = key;
        self.metrics.resets += 1;
        // Submissions held behind a missing leaf can no longer be appended.
        let stuck: Vec<(u64, u64)> = self
            .certs
            .iter()
            .filter(|((e, _), r)| *e == frozen_epoch && r.fate == CertFate::InFlight)
            .map(|(k, _)| *k)
            .collect();
        for k in stuck {
            self.certs.get_mut(&k).unwrap().fate = CertFate::Rejected;
        }
        let new_epoch = self.ground_key.epoch;
        self.emit(
            "ops",
            EventKind::Reset {
                new_epoch,
                frozen_epoch,
            },
        );
        // Anything awaiting an old-epoch response is re-sent under the new key.
        let waiting: Vec<usize> = (0..self.requests.len())
            .filter(|&i| matches!(self.requests[i].state, RequestState::InFlight { .. }))
            .collect();
        for i in waiting.into_iter().rev() {
            self.requests[i].state = RequestState::Queued;
            self.uplink_queue.push_front(i);
        }
        self.kick_uplink(self.now);
    }

    // ---- adversary ----

    fn on_adversary(&mut self, i: usize) {
        match self.config.adversary[i].clone() {
            AdversaryAction::StealKey { .. } => {
                self.adversary.stolen = Some(self.ground_key.clone());
                let epoch = self.ground_key.epoch;
                self.emit(
                    ADVERSARY,
                    EventKind::Adversary {
                        action: "steal_key".into(),
                        detail: format!("channel key for epoch {epoch}"),
                    },
                );
            }
            AdversaryAction::ForgeRequest { csr_bytes, .. } => self.forge_request(csr_bytes),
            AdversaryAction::SpoofBeacon { stations, .. } => self.spoof_beacon(&stations),
            AdversaryAction::SuppressLogSubmission { .. }
            | AdversaryAction::InjectFaults { .. } => {}
        }
    }

    fn forge_request(&mut self, csr_bytes: usize) {
        let adv = &mut self.adversary;
        adv.forged_count += 1;
        let mut id = [0u8; 16];
        adv.rng.fill_bytes(&mut id);
        let (key, how) = match &adv.stolen {
            Some(k) => (k.clone(), "stolen key"),
            None => {
                let mut guess = [0u8; 32];
                adv.rng.fill_bytes(&mut guess);
                (
                    ChannelKey {
                        key: guess,
                        epoch: 0,
                    },
                    "guessed key",
                )
            }
        };
        adv.forged_ids.insert(id);
        let csr = CsrMessage::padded(id, self.now.micros(), b"CN=forged", csr_bytes);
        let sealed = build_request(&csr, &key, &id);
        self.uplink_msg_id = self.uplink_msg_id.wrapping_add(1);
        let frames = fragment_addressed(
            &sealed,
            MessageKind::Request,
            self.uplink_msg_id,
            satellite_address(),
            ground_address(),
        )
        .expect("validated request size");
        let tx = self
            .uplink
            .inject(ADVERSARY, &frames, self.now, &[self.always])
            .expect("adversary tap registered");
        self.emit(
            ADVERSARY,
            EventKind::Adversary {
                action: "forge_request".into(),
                detail: format!("request {} under {how}", hex::encode(id)),
            },
        );
        self.dispatch(ADVERSARY, Direction::Up, &tx, &[Rx::Hsm]);
    }

    fn spoof_beacon(&mut self, targets: &[String]) {
        let seed = self.config.seed;
        let spoof = self.adversary.spoof.get_or_insert_with(|| {
            HsmState::bootstrap(
                &label_seed(seed, "spoofed-hsm"),
                PrgState::from_seed(label_seed(seed, "spoofed-ratchet")),
                &HsmConfig::default(),
            )
            .0
        });
        let beacon = spoof.make_beacon();
        let chosen: Vec<usize> = (0..self.stations.len())
            .filter(|&i| targets.is_empty() || targets.contains(&self.stations[i].id))
            .collect();
        let receivers: Vec<Visibility> = chosen
            .iter()
            .map(|&i| self.stations[i].visibility)
            .collect();
        let rx: Vec<Rx> = chosen.iter().map(|&i| Rx::Station(i)).collect();
        self.downlink_msg_id = self.downlink_msg_id.wrapping_add(1);
        let frames = fragment_addressed(
            &beacon.encode(),
            MessageKind::Beacon,
            self.downlink_msg_id,
            address("CQ", 0, false),
            satellite_address(),
        )
        .expect("beacon fits");
        let tx = self
            .downlink
            .inject(ADVERSARY, &frames, self.now, &receivers)
            .expect("adversary tap registered");
        self.emit(
            ADVERSARY,
            EventKind::Adversary {
                action: "spoof_beacon".into(),
                detail: format!(
                    "key {} to {} station(s)",
                    beacon.public_key.fingerprint(),
                    chosen.len()
                ),
            },
        );
        self.dispatch(ADVERSARY, Direction::Down, &tx, &rx);
    }

    // ---- power and peers ----

    fn on_power_tick(&mut self) {
        if !self.hsm_alive {
            return;
        }
        match self.power.advance_to(self.now.as_secs()) {
            Ok(rows) => {
                for r in rows {
                    self.emit(
                        "power",
                        EventKind::BatteryTelemetry {
                            orbit: r.orbit,
                            min_charge_wh: r.min_charge_wh,
                            dod_percent: r.dod_percent,
                        },
                    );
                }
            }
            Err(_) => {
                self.brownout();
                return;
            }
        }
        let cfg = self.power.config().clone();
        let t = self.now.as_secs();
        let period = cfg.orbit_period_s();
        let orbit_start = (t / period).floor() * period;
        let sunset = orbit_start + cfg.daylight_s;
        let next = if t < sunset - 1e-9 {
            sunset
        } else {
            // In eclipse: stop early if the battery cannot last until sunrise.
            let draw = cfg.eclipse_draw();
            let orbit_end = orbit_start + period;
            let empty_after = if draw > 0.0 {
                self.power.state().charge_wh / draw * 3600.0
            } else {
                f64::INFINITY
            };
            if t + empty_after < orbit_end {
                let at = SimTime(secs_to_us(t + empty_after) + 1);
                self.schedule(at, Action::PowerTick);
                return;
            }
            orbit_end
        };
        self.schedule(SimTime::from_secs(next), Action::PowerTick);
    }

    fn brownout(&mut self) {
        self.hsm_alive = false;
        self.metrics.brownout = true;
        self.downlink_queue.clear();
        let charge_wh = self.power.state().charge_wh;
        self.emit("power", EventKind::Brownout { charge_wh });
    }

    fn on_peer_contact(&mut self) {
        if !self.hsm_alive {
            return;
        }
        let seed = self.config.seed;
        let peer = self.peer.get_or_insert_with(|| {
            HsmState::bootstrap(
                &label_seed(seed, "peer-hsm"),
                PrgState::from_seed(label_seed(seed, "peer-ratchet")),
                &HsmConfig::default(),
            )
            .0
        });
        let ours = self.hsm.attest_peer(peer.public_key());
        let theirs = peer.attest_peer(self.hsm.public_key());
        let ours_ok =
            ours.verify_with(self.hsm.public_key()) && ours.attested_key == *peer.public_key();
        let theirs_ok =
            theirs.verify_with(peer.public_key()) && theirs.attested_key == *self.hsm.public_key();
        let (hsm_fp, peer_fp) = (
            self.hsm.public_key().fingerprint(),
            peer.public_key().fingerprint(),
        );
        self.emit(
            "hsm",
            EventKind::Attestation {
                attester: hsm_fp.clone(),
                attested: peer_fp.clone(),
                verified: ours_ok,
            },
        );
        self.emit(
            "peer",
            EventKind::Attestation {
                attester: peer_fp,
                attested: hsm_fp,
                verified: theirs_ok,
            },
        );
        if !(ours_ok && theirs_ok) {
            self.violations.push("mutual attestation failed".into());
        }
    }

    // ---- wrap-up ----

    fn finish(mut self) -> RunOutput {
        if self.hsm_alive {
            match self.power.advance_to(self.end.as_secs()) {
                Ok(rows) => {
                    for r in rows {
                        self.emit(
                            "power",
                            EventKind::BatteryTelemetry {
                                orbit: r.orbit,
                                min_charge_wh: r.min_charge_wh,
                                dod_percent: r.dod_percent,
                            },
                        );
                    }
                }
                Err(_) => self.brownout(),
            }
        }
        let m = &mut self.metrics;
        m.requests_scheduled = self.requests.len() as u64;
        m.analytic_capacity = self.capacity;
        m.max_dod_percent = self.power.max_dod_percent();
        m.final_epoch = self.hsm.epoch();
        m.uplink_airtime_s = self.uplink.airtime_us() as f64 / MICROS_PER_SEC as f64;
        m.downlink_airtime_s = self.downlink.airtime_us() as f64 / MICROS_PER_SEC as f64;
        m.certs_logged = self
            .logs
            .as_ref()
            .map_or(0, |l| l.logs().map(|l| l.len()).sum());
        let vis = self.stations[0].visibility;
        let passes = vis.orbit_index(SimTime(self.end.0.saturating_sub(1))) + 1;
        if passes > 0 && m.requests_completed_per_pass.len() < passes as usize {
            m.requests_completed_per_pass.resize(passes as usize, 0);
        }
        let mut by_fate: BTreeMap<CertFate, u64> = BTreeMap::new();
        for r in self.certs.values() {
            *by_fate.entry(r.fate).or_default() += 1;
        }
        let count = |f| by_fate.get(&f).copied().unwrap_or(0);
        m.certs_suppressed = count(CertFate::Suppressed);
        m.certs_forged = count(CertFate::Forged);
        m.certs_rejected = count(CertFate::Rejected);
        m.certs_in_flight = count(CertFate::InFlight);

        let mut violations = std::mem::take(&mut self.violations);
        let m = &self.metrics;
        if count(CertFate::Logged) != m.certs_logged {
            violations.push(format!(
                "log holds {} certificates but {} were tracked as logged",
                m.certs_logged,
                count(CertFate::Logged)
            ));
        }
        if m.certs_logged > m.certs_signed {
            violations.push("more certificates logged than signed".into());
        }
        let accounted = m.certs_logged
            + m.certs_suppressed
            + m.certs_forged
            + m.certs_rejected
            + m.certs_in_flight;
        if accounted != m.certs_signed {
            violations.push(format!(
                "conservation: {accounted} accounted for, {} signed",
                m.certs_signed
            ));
        }
        for (pass, &n) in m.requests_completed_per_pass.iter().enumerate() {
            if n > self.capacity {
                violations.push(format!(
                    "pass {pass} completed {n} requests, above capacity {}",
                    self.capacity
                ));
            }
        }
        if self.events.windows(2).any(|w| w[1].time < w[0].time) {
            violations.push("event times decrease".into());
        }
        let window = secs_to_us(self.config.link.duty_window_s);
        let budget = (window as f64 * self.config.link.tx_duty_cycle).floor() as u64;
        let spans = &self.downlink_spans;
        for &(_, end) in spans {
            let lo = end.saturating_sub(window);
            let busy: u64 = spans
                .iter()
                .map(|&(a, b)| b.min(end).saturating_sub(a.max(lo)))
                .sum();
            if busy > budget {
                violations.push(format!(
                    "downlink duty budget exceeded in window ending {end} us"
                ));
                break;
            }
        }
        if let Some(logs) = &self.logs {
            for log in logs.logs() {
                for i in 0..log.len() {
                    match log.certificate(i) {
                        Some(c) if c.signer_epoch == log.epoch() && c.verify(logs.hsm_key()) => {}
                        _ => violations
                            .push(format!("epoch {} log entry {i} is invalid", log.epoch())),
                    }
                }
            }
        }

        RunOutput {
            events: self.events,
            metrics: self.metrics,
            violations,
            logs: self.logs,
            hsm: self.hsm,
            certificates: self.certs.into_values().collect(),
        }
    }
}
