//! Simulated radio link: framing, airtime, pass windows, duty cycle, loss and
//! adversary taps.

pub mod channel;
pub mod frame;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{secs_to_us, SimTime, MICROS_PER_SEC};

pub use channel::{
    transmit, ChannelTap, Direction, DutyGate, Fate, LinkChannel, TapError, TapMode, Transmission,
    TxFrame,
};
pub use frame::{
    fragment, frame_count, reassemble, Ax25Frame, FrameError, Incomplete, Message, MessageHeader,
    MessageKind, Reassembler,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub uplink_bps: u32,
    pub downlink_bps: u32,
    /// Fraction of any sliding window the downlink transmitter may be keyed.
    pub tx_duty_cycle: f64,
    pub duty_window_s: f64,
    pub pass_duration_s: f64,
    pub orbit_period_s: f64,
    pub loss_probability: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            uplink_bps: 1200,
            downlink_bps: 2400,
            tx_duty_cycle: 0.30,
            duty_window_s: 60.0,
            pass_duration_s: 600.0,
            orbit_period_s: 5400.0,
            loss_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {reason}")]
pub struct LinkConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), LinkConfigError> {
        let err = |field, reason: &str| {
            Err(LinkConfigError {
                field,
                reason: reason.to_string(),
            })
        };
        if self.uplink_bps == 0 {
            return err("uplink_bps", "must be positive");
        }
        if self.downlink_bps == 0 {
            return err("downlink_bps", "must be positive");
        }
        if !(self.tx_duty_cycle > 0.0 && self.tx_duty_cycle <= 1.0) {
            return err("tx_duty_cycle", "must be in (0, 1]");
        }
        if !(self.duty_window_s.is_finite() && self.duty_window_s > 0.0) {
            return err("duty_window_s", "must be positive");
        }
        if !(self.orbit_period_s.is_finite() && self.orbit_period_s > 0.0) {
            return err("orbit_period_s", "must be positive");
        }
        if !(self.pass_duration_s > 0.0 && self.pass_duration_s <= self.orbit_period_s) {
            return err("pass_duration_s", "must be in (0, orbit_period_s]");
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return err("loss_probability", "must be in [0, 1]");
        }
        let budget = self.tx_duty_cycle * self.duty_window_s;
        let frame =
            airtime_us(frame::MAX_FRAME_LEN, self.downlink_bps) as f64 / MICROS_PER_SEC as f64;
        if frame > budget {
            return err(
                "tx_duty_cycle",
                "duty budget per window is shorter than one full downlink frame",
            );
        }
        Ok(())
    }

    pub fn visibility(&self, offset_s: f64) -> Visibility {
        Visibility {
            period_us: secs_to_us(self.orbit_period_s),
            duration_us: secs_to_us(self.pass_duration_s),
            offset_us: secs_to_us(offset_s),
        }
    }
}

/// Serialization time of `bytes` at `bps`, rounded up to whole microseconds.
pub fn airtime_us(bytes: usize, bps: u32) -> u64 {
    (bytes as u64 * 8 * MICROS_PER_SEC).div_ceil(bps as u64)
}

/// Airtime of a whole message: the sum over the frames `fragment` would
/// produce for `payload_len` bytes.
pub fn message_airtime_us(payload_len: usize, bps: u32) -> u64 {
    frame::encoded_lengths(payload_len)
        .map(|len| airtime_us(len, bps))
        .sum()
}

/// Bits on air for a message of `payload_len` bytes.
pub fn message_bits(payload_len: usize) -> u64 {
    frame::encoded_lengths(payload_len)
        .map(|l| l as u64 * 8)
        .sum()
}

/// True while `t` seconds lies inside a pass for a station with zero offset.
pub fn pass_visible(config: &LinkConfig, t: f64) -> bool {
    config.visibility(0.0).visible(SimTime::from_secs(t))
}

/// Square-wave pass schedule for one ground station: visible for
/// `duration` at the start of every `period`, shifted by `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visibility {
    pub period_us: u64,
    pub duration_us: u64,
    pub offset_us: u64,
}

impl Visibility {
    fn phase(&self, t: SimTime) -> u64 {
        (t.0 as i128 - self.offset_us as i128).rem_euclid(self.period_us as i128) as u64
    }

    pub fn visible(&self, t: SimTime) -> bool {
        self.phase(t) < self.duration_us
    }

    /// End of the pass containing `t`, if `t` is inside one.
    pub fn pass_end(&self, t: SimTime) -> Option<SimTime> {
        let phase = self.phase(t);
        (phase < self.duration_us).then(|| SimTime(t.0 + self.duration_us - phase))
    }

    /// Start of the pass containing `t`, or of the next one. A pass already
    /// running at time zero reports zero.
    pub fn next_pass_start(&self, t: SimTime) -> SimTime {
        let phase = self.phase(t) as i128;
        let start = t.0 as i128 - phase;
        let start = if phase < self.duration_us as i128 {
            start
        } else {
            start + self.period_us as i128
        };
        SimTime(start.max(0) as u64)
    }

    /// Whether an interval `[start, end]` fits entirely inside one pass.
    pub fn covers(&self, start: SimTime, end: SimTime) -> bool {
        self.pass_end(start).is_some_and(|pe| end <= pe)
    }

    /// Index of the orbit containing `t`; pass `k` starts at
    /// `offset + k * period`. Times before the first pass map to `-1`.
    pub fn orbit_index(&self, t: SimTime) -> i64 {
        (t.0 as i128 - self.offset_us as i128).div_euclid(self.period_us as i128) as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_windows() {
        let c = LinkConfig::default();
        assert!(pass_visible(&c, 0.0));
        assert!(pass_visible(&c, 599.999));
        assert!(!pass_visible(&c, 600.0));
        assert!(!pass_visible(&c, 3000.0));
        assert!(pass_visible(&c, 5400.0));
    }

    #[test]
    fn visibility_with_offset() {
        let v = LinkConfig::default().visibility(100.0);
        assert!(!v.visible(SimTime::from_secs(50.0)));
        assert!(v.visible(SimTime::from_secs(100.0)));
        assert_eq!(
            v.pass_end(SimTime::from_secs(150.0)),
            Some(SimTime::from_secs(700.0))
        );
        assert_eq!(
            v.next_pass_start(SimTime::from_secs(800.0)),
            SimTime::from_secs(5500.0)
        );
        assert_eq!(v.orbit_index(SimTime::from_secs(50.0)), -1);
        assert_eq!(v.orbit_index(SimTime::from_secs(5500.0)), 1);
        assert!(v.covers(SimTime::from_secs(600.0), SimTime::from_secs(700.0)));
        assert!(!v.covers(SimTime::from_secs(600.0), SimTime::from_secs(700.5)));
    }

    #[test]
    fn airtime_figures() {
        assert_eq!(airtime_us(291, 1200), 1_940_000);
        // 10 full frames plus one carrying 50 data bytes: 24,000 bits.
        assert_eq!(message_bits(2560), 24_000);
        assert_eq!(message_airtime_us(2560, 1200), 20_000_000);
    }

    #[test]
    fn validation() {
        assert!(LinkConfig::default().validate().is_ok());
        let bad = LinkConfig {
            tx_duty_cycle: 0.0,
            ..LinkConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().field, "tx_duty_cycle");
        let bad = LinkConfig {
            loss_probability: 1.5,
            ..LinkConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().field, "loss_probability");
    }
}
