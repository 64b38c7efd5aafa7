//! Orbit-averaged power budget and battery state.
//!
//! Daylight: solar input covers the load and the battery recharges at
//! `recharge_w`. Eclipse: the battery alone supplies the on-board computer
//! plus the duty-averaged transceiver draw. Every orbit starts in daylight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SECS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub solar_input_w: f64,
    pub obc_w: f64,
    pub tx_w: f64,
    pub rx_w: f64,
    pub tx_duty: f64,
    pub recharge_w: f64,
    pub battery_wh: f64,
    pub daylight_s: f64,
    pub eclipse_s: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            solar_input_w: 3.82,
            obc_w: 0.2,
            tx_w: 1.7,
            rx_w: 0.2,
            tx_duty: 0.30,
            recharge_w: 0.85,
            battery_wh: 10.0,
            daylight_s: 2700.0,
            eclipse_s: 2700.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {reason}")]
pub struct PowerConfigError {
    pub field: &'static str,
    pub reason: &'static str,
}

impl PowerConfig {
    pub fn validate(&self) -> Result<(), PowerConfigError> {
        let fields = [
            ("solar_input_w", self.solar_input_w),
            ("obc_w", self.obc_w),
            ("tx_w", self.tx_w),
            ("rx_w", self.rx_w),
            ("tx_duty", self.tx_duty),
            ("recharge_w", self.recharge_w),
            ("battery_wh", self.battery_wh),
            ("daylight_s", self.daylight_s),
            ("eclipse_s", self.eclipse_s),
        ];
        for (field, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PowerConfigError {
                    field,
                    reason: "must be a non-negative number",
                });
            }
        }
        if self.tx_duty > 1.0 {
            return Err(PowerConfigError {
                field: "tx_duty",
                reason: "must be at most 1",
            });
        }
        if self.battery_wh == 0.0 {
            return Err(PowerConfigError {
                field: "battery_wh",
                reason: "must be positive",
            });
        }
        if self.orbit_period_s() == 0.0 {
            return Err(PowerConfigError {
                field: "daylight_s",
                reason: "daylight_s + eclipse_s must be positive",
            });
        }
        Ok(())
    }

    pub fn orbit_period_s(&self) -> f64 {
        self.daylight_s + self.eclipse_s
    }

    /// Duty-weighted transceiver draw.
    pub fn transceiver_average(&self) -> f64 {
        self.tx_duty * self.tx_w + (1.0 - self.tx_duty) * self.rx_w
    }

    /// Battery draw while in eclipse.
    pub fn eclipse_draw(&self) -> f64 {
        self.obc_w + self.transceiver_average()
    }

    /// Whether `t` seconds into the run falls in daylight.
    pub fn is_daylight(&self, t: f64) -> bool {
        t.rem_euclid(self.orbit_period_s()) < self.daylight_s
    }
}

/// Average daylight consumption including recharge, to the microwatt.
pub fn average_consumption(config: &PowerConfig) -> f64 {
    let watts = config.obc_w + config.transceiver_average() + config.recharge_w;
    (watts * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub charge_wh: f64,
    pub min_charge_wh: f64,
}

impl BatteryState {
    pub fn full(config: &PowerConfig) -> Self {
        Self {
            charge_wh: config.battery_wh,
            min_charge_wh: config.battery_wh,
        }
    }

    pub fn dod_percent(&self, config: &PowerConfig) -> f64 {
        (config.battery_wh - self.min_charge_wh) / config.battery_wh * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("battery exhausted: needed {needed_wh:.6} Wh with {available_wh:.6} Wh left")]
pub struct BrownoutError {
    pub needed_wh: f64,
    pub available_wh: f64,
}

pub fn step(
    state: BatteryState,
    config: &PowerConfig,
    dt: f64,
    daylight: bool,
) -> Result<BatteryState, BrownoutError> {
    debug_assert!(dt > 0.0);
    let charge_wh = if daylight {
        (state.charge_wh + config.recharge_w * dt / SECS_PER_HOUR).min(config.battery_wh)
    } else {
        let needed_wh = config.eclipse_draw() * dt / SECS_PER_HOUR;
        if needed_wh > state.charge_wh {
            return Err(BrownoutError {
                needed_wh,
                available_wh: state.charge_wh,
            });
        }
        state.charge_wh - needed_wh
    };
    Ok(BatteryState {
        charge_wh,
        min_charge_wh: state.min_charge_wh.min(charge_wh),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitTelemetry {
    pub orbit: u64,
    pub min_charge_wh: f64,
    pub dod_percent: f64,
}

/// Battery integrated across day/night boundaries, with one telemetry row
/// per completed orbit.
#[derive(Debug, Clone)]
pub struct PowerModel {
    config: PowerConfig,
    state: BatteryState,
    now: f64,
    orbit_min_wh: f64,
}

impl PowerModel {
    pub fn new(config: PowerConfig) -> Self {
        let state = BatteryState::full(&config);
        Self {
            orbit_min_wh: state.charge_wh,
            state,
            now: 0.0,
            config,
        }
    }

    pub fn config(&self) -> &PowerConfig {
        &self.config
    }

    pub fn state(&self) -> BatteryState {
        self.state
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn max_dod_percent(&self) -> f64 {
        self.state.dod_percent(&self.config)
    }

    /// Integrates to `t`. Orbits that complete on the way produce telemetry.
    /// On brownout the model stays at the instant charge ran out.
    pub fn advance_to(&mut self, t: f64) -> Result<Vec<OrbitTelemetry>, BrownoutError> {
        let period = self.config.orbit_period_s();
        let mut rows = Vec::new();
        while self.now < t {
            let orbit = (self.now / period).floor();
            let orbit_start = orbit * period;
            let sunset = orbit_start + self.config.daylight_s;
            let orbit_end = orbit_start + period;
            let daylight = self.now < sunset;
            let boundary = if daylight { sunset } else { orbit_end };
            let until = boundary.min(t);
            if until > self.now {
                match step(self.state, &self.config, until - self.now, daylight) {
                    Ok(s) => self.state = s,
                    Err(e) => {
                        let rate = self.config.eclipse_draw() / SECS_PER_HOUR;
                        if rate > 0.0 {
                            self.now += self.state.charge_wh / rate;
                        }
                        self.state.charge_wh = 0.0;
                        self.state.min_charge_wh = 0.0;
                        return Err(e);
                    }
                }
                self.orbit_min_wh = self.orbit_min_wh.min(self.state.charge_wh);
            }
            self.now = until;
            if self.now >= orbit_end {
                rows.push(OrbitTelemetry {
                    orbit: orbit as u64,
                    min_charge_wh: self.orbit_min_wh,
                    dod_percent: (self.config.battery_wh - self.orbit_min_wh)
                        / self.config.battery_wh
                        * 100.0,
                });
                self.orbit_min_wh = self.state.charge_wh;
            }
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget() {
        let c = PowerConfig::default();
        assert!((c.transceiver_average() - 0.65).abs() < 1e-12);
        assert!((average_consumption(&c) - 1.70).abs() < 1e-12);
        assert!((average_consumption(&c) / c.solar_input_w - 0.445).abs() < 0.001);
        assert!((c.eclipse_draw() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn degenerate_duty() {
        let c = PowerConfig {
            tx_duty: 0.0,
            tx_w: 0.2,
            ..PowerConfig::default()
        };
        assert!((average_consumption(&c) - (0.2 + 0.2 + 0.85)).abs() < 1e-12);
    }

    #[test]
    fn eclipse_draw_and_clamp() {
        let c = PowerConfig::default();
        let full = BatteryState::full(&c);
        let after = step(full, &c, 2700.0, false).unwrap();
        assert!((c.battery_wh - after.charge_wh - 0.6375).abs() < 1e-12);
        let day = step(full, &c, 100.0, true).unwrap();
        assert_eq!(day.charge_wh, c.battery_wh);
    }

    #[test]
    fn brownout() {
        let c = PowerConfig {
            battery_wh: 0.5,
            ..PowerConfig::default()
        };
        let err = step(BatteryState::full(&c), &c, 2700.0, false).unwrap_err();
        assert_eq!(err.available_wh, 0.5);
        let mut m = PowerModel::new(c);
        assert!(m.advance_to(5400.0).is_err());
        // 0.5 Wh at 0.85 W lasts about 2117.6 s into the eclipse
        assert!((m.now() - (2700.0 + 0.5 / 0.85 * 3600.0)).abs() < 1e-6);
    }

    #[test]
    fn ten_orbits_from_full() {
        let mut m = PowerModel::new(PowerConfig::default());
        let rows = m.advance_to(10.0 * 5400.0).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0].orbit, 0);
        for r in &rows {
            assert!(r.min_charge_wh >= 9.36);
            assert!((r.dod_percent - 6.375).abs() < 1e-9);
        }
        assert!((m.max_dod_percent() - 6.375).abs() < 1e-9);
    }

    #[test]
    fn chunked_advance_matches_single_step() {
        let mut a = PowerModel::new(PowerConfig::default());
        let mut b = PowerModel::new(PowerConfig::default());
        a.advance_to(12_345.0).unwrap();
        for t in (1..=12_345).map(f64::from) {
            b.advance_to(t).unwrap();
        }
        assert!((a.state().charge_wh - b.state().charge_wh).abs() < 1e-9);
    }
}
