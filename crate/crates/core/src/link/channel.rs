use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::frame::{Ax25Frame, INFO_MAX};
use super::{airtime_us, LinkConfig, Visibility};
use crate::time::{secs_to_us, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

/// Sliding-window transmit budget: within any window of `window_us`, the
/// transmitter may be keyed for at most `budget_us`.
#[derive(Debug, Clone)]
pub struct DutyGate {
    window_us: u64,
    budget_us: u64,
    history: VecDeque<(u64, u64)>,
}

impl DutyGate {
    pub fn new(window_s: f64, duty_cycle: f64) -> Self {
        let window_us = secs_to_us(window_s);
        Self {
            window_us,
            budget_us: (window_us as f64 * duty_cycle).floor() as u64,
            history: VecDeque::new(),
        }
    }

    pub fn budget_us(&self) -> u64 {
        self.budget_us
    }

    /// Earliest start at or after `t` for a transmission of `airtime` that
    /// keeps every window within budget. `t` must not precede the end of the
    /// last recorded transmission.
    pub fn earliest_start(&mut self, t: SimTime, airtime: u64) -> SimTime {
        assert!(
            airtime <= self.budget_us,
            "transmission longer than duty budget"
        );
        let s = t.0;
        let ws = (s + airtime).saturating_sub(self.window_us);
        while self.history.front().is_some_and(|&(_, end)| end <= ws) {
            self.history.pop_front();
        }
        let busy: u64 = self
            .history
            .iter()
            .map(|&(a, b)| b.saturating_sub(a.max(ws)))
            .sum();
        if busy + airtime <= self.budget_us {
            return t;
        }
        // Slide the window start forward until enough past airtime has left it.
        let mut excess = busy + airtime - self.budget_us;
        let mut new_ws = ws;
        for &(a, b) in &self.history {
            let from = a.max(ws);
            let len = b - from;
            if excess >= len {
                excess -= len;
                new_ws = b;
                if excess == 0 {
                    break;
                }
            } else {
                new_ws = from + excess;
                break;
            }
        }
        SimTime((new_ws + self.window_us - airtime).max(s))
    }

    pub fn record(&mut self, start: SimTime, end: SimTime) {
        self.history.push_back((start.0, end.0));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapMode {
    Observe,
    Inject,
    Suppress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTap {
    pub mode: TapMode,
    pub owner: String,
}

/// Called for every frame put on air. For [`TapMode::Suppress`] taps a
/// `true` return jams the frame for all receivers; other modes ignore it.
pub type TapCallback = Box<dyn FnMut(&Ax25Frame, SimTime) -> bool>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TapError {
    #[error("{0} has no inject tap on this channel")]
    NotRegistered(String),
    #[error("injected frame violates framing rules: {0}")]
    NonConformant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "fate", content = "by")]
pub enum Fate {
    Arrived,
    OutOfPass,
    Lost,
    Suppressed(String),
}

#[derive(Debug, Clone)]
pub struct TxFrame {
    pub frame: Ax25Frame,
    pub encoded: Vec<u8>,
    pub start: SimTime,
    /// Last bit on air; arrival time for every receiver that gets it.
    pub end: SimTime,
    /// Fate per receiver, in the order receivers were passed.
    pub fates: Vec<Fate>,
}

#[derive(Debug, Clone, Default)]
pub struct Transmission {
    pub frames: Vec<TxFrame>,
}

impl Transmission {
    pub fn end(&self) -> Option<SimTime> {
        self.frames.last().map(|f| f.end)
    }

    /// Frames that reached receiver `rx`.
    pub fn arrived(&self, rx: usize) -> impl Iterator<Item = &TxFrame> {
        self.frames
            .iter()
            .filter(move |f| f.fates[rx] == Fate::Arrived)
    }
}

/// One transmitter and its broadcast medium. Serializes frames back to back,
/// applies the duty gate on the downlink, runs taps in registration order,
/// then decides per receiver whether each frame arrives.
pub struct LinkChannel {
    direction: Direction,
    bps: u32,
    loss_probability: f64,
    gate: Option<DutyGate>,
    busy_until: SimTime,
    airtime_us: u64,
    rng: ChaCha8Rng,
    taps: Vec<(ChannelTap, TapCallback)>,
}

impl fmt::Debug for LinkChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinkChannel")
            .field("direction", &self.direction)
            .field("bps", &self.bps)
            .field("busy_until", &self.busy_until)
            .field("airtime_us", &self.airtime_us)
            .field(
                "taps",
                &self.taps.iter().map(|(t, _)| t).collect::<Vec<_>>(),
            )
            .finish_non_exhaustive()
    }
}

impl LinkChannel {
    pub fn new(config: &LinkConfig, direction: Direction, rng_seed: [u8; 32]) -> Self {
        let (bps, gate) = match direction {
            Direction::Up => (config.uplink_bps, None),
            Direction::Down => (
                config.downlink_bps,
                Some(DutyGate::new(config.duty_window_s, config.tx_duty_cycle)),
            ),
        };
        Self {
            direction,
            bps,
            loss_probability: config.loss_probability,
            gate,
            busy_until: SimTime::ZERO,
            airtime_us: 0,
            rng: ChaCha8Rng::from_seed(rng_seed),
            taps: Vec::new(),
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn bps(&self) -> u32 {
        self.bps
    }

    /// When the transmitter will next be idle.
    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    /// Total keyed time so far.
    pub fn airtime_us(&self) -> u64 {
        self.airtime_us
    }

    pub fn register_tap(&mut self, tap: ChannelTap, callback: TapCallback) {
        self.taps.push((tap, callback));
    }

    /// Start time the next frame of `len` bytes would get if sent at `earliest`.
    pub fn next_slot(&mut self, earliest: SimTime, len: usize) -> SimTime {
        let t = earliest.max(self.busy_until);
        let a = airtime_us(len, self.bps);
        match &mut self.gate {
            Some(g) => g.earliest_start(t, a),
            None => t,
        }
    }

    pub fn transmit(
        &mut self,
        frames: &[Ax25Frame],
        earliest: SimTime,
        receivers: &[Visibility],
    ) -> Transmission {
        let mut out = Transmission::default();
        let mut cursor = earliest;
        for frame in frames {
            let encoded = frame.encode();
            let start = self.next_slot(cursor, encoded.len());
            let end = start + airtime_us(encoded.len(), self.bps);
            if let Some(g) = &mut self.gate {
                g.record(start, end);
            }
            self.busy_until = end;
            self.airtime_us += end - start;
            cursor = end;
            out.frames
                .push(self.propagate(frame.clone(), encoded, start, end, receivers));
        }
        out
    }

    /// Adversary transmission from its own radio: same bit rate, no duty
    /// gate, does not occupy the legitimate transmitter.
    pub fn inject(
        &mut self,
        owner: &str,
        frames: &[Ax25Frame],
        earliest: SimTime,
        receivers: &[Visibility],
    ) -> Result<Transmission, TapError> {
        if !self
            .taps
            .iter()
            .any(|(t, _)| t.mode == TapMode::Inject && t.owner == owner)
        {
            return Err(TapError::NotRegistered(owner.to_string()));
        }
        for f in frames {
            if f.info.len() > INFO_MAX {
                return Err(TapError::NonConformant(format!(
                    "info of {} bytes",
                    f.info.len()
                )));
            }
            f.header()
                .map_err(|e| TapError::NonConformant(e.to_string()))?;
        }
        let mut out = Transmission::default();
        let mut cursor = earliest;
        for frame in frames {
            let encoded = frame.encode();
            let end = cursor + airtime_us(encoded.len(), self.bps);
            out.frames
                .push(self.propagate(frame.clone(), encoded, cursor, end, receivers));
            cursor = end;
        }
        Ok(out)
    }

    fn propagate(
        &mut self,
        frame: Ax25Frame,
        encoded: Vec<u8>,
        start: SimTime,
        end: SimTime,
        receivers: &[Visibility],
    ) -> TxFrame {
        let mut jammed_by = None;
        for (tap, cb) in &mut self.taps {
            let wants = cb(&frame, start);
            if tap.mode == TapMode::Suppress && wants && jammed_by.is_none() {
                jammed_by = Some(tap.owner.clone());
            }
        }
        let fates = receivers
            .iter()
            .map(|vis| {
                if let Some(owner) = &jammed_by {
                    Fate::Suppressed(owner.clone())
                } else if !vis.covers(start, end) {
                    Fate::OutOfPass
                } else if self.loss_probability > 0.0 && self.rng.gen_bool(self.loss_probability) {
                    Fate::Lost
                } else {
                    Fate::Arrived
                }
            })
            .collect();
        TxFrame {
            frame,
            encoded,
            start,
            end,
            fates,
        }
    }
}

/// Sends `frames` to a single zero-offset ground station starting at
/// `start_s` seconds, with loss drawn from `seed`.
pub fn transmit(
    config: &LinkConfig,
    frames: &[Ax25Frame],
    direction: Direction,
    start_s: f64,
    seed: u64,
) -> Transmission {
    let mut rng_seed = [0u8; 32];
    rng_seed[..8].copy_from_slice(&seed.to_be_bytes());
    let mut ch = LinkChannel::new(config, direction, rng_seed);
    ch.transmit(
        frames,
        SimTime::from_secs(start_s),
        &[config.visibility(0.0)],
    )
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;
    use std::rc::Rc;

    use super::*;
    use crate::link::frame::{fragment, MessageKind};
    use crate::link::message_airtime_us;

    fn busy_in(frames: &[(u64, u64)], lo: u64, hi: u64) -> u64 {
        frames
            .iter()
            .map(|&(a, b)| b.min(hi).saturating_sub(a.max(lo)))
            .sum()
    }

    #[test]
    fn uplink_request_serialization() {
        let c = LinkConfig::default();
        let frames = fragment(&[0; 2560], MessageKind::Request, 1).unwrap();
        let tx = transmit(&c, &frames, Direction::Up, 0.0, 0);
        assert_eq!(tx.frames.len(), 11);
        assert_eq!(tx.end(), Some(SimTime(message_airtime_us(2560, 1200))));
        assert!(tx.frames.iter().all(|f| f.fates == [Fate::Arrived]));
        assert!(tx.frames.windows(2).all(|w| w[0].end == w[1].start));
    }

    #[test]
    fn frames_outside_pass_are_dropped() {
        let c = LinkConfig::default();
        let frames = fragment(&[0; 100], MessageKind::Request, 1).unwrap();
        let tx = transmit(&c, &frames, Direction::Up, 2000.0, 0);
        assert_eq!(tx.frames[0].fates, [Fate::OutOfPass]);
        // straddling the end of the pass also drops
        let tx = transmit(&c, &frames, Direction::Up, 599.9, 0);
        assert_eq!(tx.frames[0].fates, [Fate::OutOfPass]);
    }

    #[test]
    fn total_loss() {
        let c = LinkConfig {
            loss_probability: 1.0,
            ..LinkConfig::default()
        };
        let frames = fragment(&[0; 600], MessageKind::Request, 1).unwrap();
        let tx = transmit(&c, &frames, Direction::Up, 0.0, 0);
        assert!(tx.frames.iter().all(|f| f.fates == [Fate::Lost]));
    }

    #[test]
    fn downlink_respects_sliding_duty_window() {
        let c = LinkConfig::default();
        let mut ch = LinkChannel::new(&c, Direction::Down, [0; 32]);
        let frames = fragment(&vec![0; 251 * 100], MessageKind::Certificate, 1).unwrap();
        let tx = ch.transmit(&frames, SimTime::ZERO, &[c.visibility(0.0)]);
        let spans: Vec<(u64, u64)> = tx.frames.iter().map(|f| (f.start.0, f.end.0)).collect();
        let budget = 18_000_000;
        for &(_, end) in &spans {
            let lo = end.saturating_sub(60_000_000);
            assert!(busy_in(&spans, lo, end) <= budget);
        }
        // the gate is tight: first window is filled exactly
        assert_eq!(busy_in(&spans, 0, 60_000_000), budget);
        let per_frame = airtime_us(291, 2400);
        assert!(spans.iter().all(|&(a, b)| b - a == per_frame));
    }

    #[test]
    fn gate_waits_for_oldest_airtime_to_leave() {
        let mut g = DutyGate::new(60.0, 0.30);
        g.record(SimTime(0), SimTime(18_000_000));
        let s = g.earliest_start(SimTime(18_000_000), 1_000_000);
        assert_eq!(s, SimTime(60_000_000));
        let mut g = DutyGate::new(60.0, 0.30);
        g.record(SimTime(0), SimTime(10_000_000));
        g.record(SimTime(30_000_000), SimTime(38_000_000));
        // 18 s busy; a 2 s frame must wait until 2 s of the first burst age out
        let s = g.earliest_start(SimTime(38_000_000), 2_000_000);
        assert_eq!(s, SimTime(60_000_000));
    }

    #[test]
    fn taps_run_in_order_and_suppress() {
        let c = LinkConfig::default();
        let mut ch = LinkChannel::new(&c, Direction::Up, [0; 32]);
        let log = Rc::new(RefCell::new(Vec::new()));
        let l1 = log.clone();
        ch.register_tap(
            ChannelTap {
                mode: TapMode::Observe,
                owner: "eve".into(),
            },
            Box::new(move |_, _| {
                l1.borrow_mut().push("eve");
                true
            }),
        );
        let l2 = log.clone();
        ch.register_tap(
            ChannelTap {
                mode: TapMode::Suppress,
                owner: "mallory".into(),
            },
            Box::new(move |f, _| {
                l2.borrow_mut().push("mallory");
                f.header().unwrap().frame_index == 1
            }),
        );
        let frames = fragment(&[0; 400], MessageKind::Request, 1).unwrap();
        let tx = ch.transmit(&frames, SimTime::ZERO, &[c.visibility(0.0)]);
        assert_eq!(*log.borrow(), ["eve", "mallory", "eve", "mallory"]);
        assert_eq!(tx.frames[0].fates, [Fate::Arrived]);
        assert_eq!(tx.frames[1].fates, [Fate::Suppressed("mallory".into())]);
    }

    #[test]
    fn injection_requires_a_tap() {
        let c = LinkConfig::default();
        let mut ch = LinkChannel::new(&c, Direction::Down, [0; 32]);
        let frames = fragment(b"spoof", MessageKind::Beacon, 7).unwrap();
        let rx = [c.visibility(0.0)];
        assert!(matches!(
            ch.inject("eve", &frames, SimTime::ZERO, &rx),
            Err(TapError::NotRegistered(_))
        ));
        ch.register_tap(
            ChannelTap {
                mode: TapMode::Inject,
                owner: "eve".into(),
            },
            Box::new(|_, _| false),
        );
        let tx = ch.inject("eve", &frames, SimTime::ZERO, &rx).unwrap();
        assert_eq!(tx.frames[0].fates, [Fate::Arrived]);
        assert_eq!(ch.airtime_us(), 0);
        let mut bad = frames[0].clone();
        bad.info.truncate(2);
        assert!(matches!(
            ch.inject("eve", &[bad], SimTime::ZERO, &rx),
            Err(TapError::NonConformant(_))
        ));
    }
}
