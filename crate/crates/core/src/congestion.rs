//! Density-driven rate control: EWMA vehicle-density smoothing, the
//! density-to-interval mapping, reservation-period quantization and the
//! transmission gate.

use serde::{Deserialize, Serialize};

use crate::sps::{BASE_PERIOD_MS, SLOT_MS};

/// Smallest commanded inter-transmission interval, seconds.
pub const ITT_MIN_S: f64 = 0.1;
/// Largest commanded inter-transmission interval, seconds.
pub const ITT_MAX_S: f64 = 0.6;
/// EWMA weight of the newest density sample.
pub const VD_EWMA_ALPHA: f64 = 0.05;
/// Gate slack absorbing slot-grid phase, seconds (half a slot).
pub const GATE_EPSILON_S: f64 = 0.0005;

/// Rate-control state of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionState {
    /// Smoothed vehicle density, seeded with the first instantaneous value.
    pub avg_vd: f64,
    initialized: bool,
    /// Interval currently commanded, seconds.
    pub itt_s: f64,
    /// Reservation period quantized from the commanded interval.
    pub rrp_ms: u32,
    /// Epoch of the newest message handed to the MAC, in slots. One-shot
    /// diversions count from their opportunity, not their shifted airtime.
    pub last_msg_epoch_slot: Option<u64>,
}

impl Default for CongestionState {
    fn default() -> Self {
        CongestionState {
            avg_vd: 0.0,
            initialized: false,
            itt_s: ITT_MIN_S,
            rrp_ms: BASE_PERIOD_MS as u32,
            last_msg_epoch_slot: None,
        }
    }
}

impl CongestionState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Folds one instantaneous density sample into the running average. The
/// very first sample becomes the average outright so that a run does not
/// start from an artificial empty road.
pub fn update_avg_vd(state: &mut CongestionState, vd_instant: f64) {
    debug_assert!(vd_instant >= 0.0);
    if state.initialized {
        state.avg_vd = VD_EWMA_ALPHA * vd_instant + (1.0 - VD_EWMA_ALPHA) * state.avg_vd;
    } else {
        state.avg_vd = vd_instant;
        state.initialized = true;
    }
}

/// Maps smoothed density to the commanded transmission interval.
pub fn itt_from_vd(avg_vd: f64) -> f64 {
    if avg_vd <= 25.0 {
        ITT_MIN_S
    } else if avg_vd < 150.0 {
        avg_vd / 250.0
    } else {
        ITT_MAX_S
    }
}

/// Quantizes a commanded interval onto the reservation-period grid,
/// rounding to the nearest period with a floor of one.
pub fn quantize_rrp_ms(itt_s: f64) -> u32 {
    let periods = (itt_s / (BASE_PERIOD_MS as f64 / 1000.0)).round().max(1.0);
    (periods as u32) * BASE_PERIOD_MS as u32
}

/// Whether enough time has passed since the last message epoch.
pub fn gate_allows(last_msg_epoch_slot: Option<u64>, now_slot: u64, itt_s: f64) -> bool {
    match last_msg_epoch_slot {
        None => true,
        Some(last) => {
            let gap_s = (now_slot - last) as f64 * (SLOT_MS as f64 / 1000.0);
            gap_s >= itt_s - GATE_EPSILON_S
        }
    }
}

/// Outcome of the rate-control step at one grid opportunity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateDecision {
    /// The gate admits a message this opportunity.
    pub transmit: bool,
    /// The quantized period moved to a new value; the caller must re-select
    /// into the new grid instead of transmitting.
    pub rrp_changed: bool,
    pub rrp_ms: u32,
}

/// Recomputes the commanded interval and period from the current smoothed
/// density and evaluates the gate. With rate control disabled the interval
/// stays pinned at the minimum (the gate still runs, trivially passing on
/// the base grid).
pub fn gate_and_quantize(
    state: &mut CongestionState,
    now_slot: u64,
    congestion_enabled: bool,
) -> GateDecision {
    let itt = if congestion_enabled {
        itt_from_vd(state.avg_vd)
    } else {
        ITT_MIN_S
    };
    state.itt_s = itt;
    let rrp_ms = quantize_rrp_ms(itt);
    let rrp_changed = rrp_ms != state.rrp_ms;
    state.rrp_ms = rrp_ms;
    GateDecision {
        transmit: gate_allows(state.last_msg_epoch_slot, now_slot, itt),
        rrp_changed,
        rrp_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewma_fixed_point_and_step() {
        let mut s = CongestionState::new();
        update_avg_vd(&mut s, 20.0);
        assert_eq!(s.avg_vd, 20.0, "first sample seeds the average");
        update_avg_vd(&mut s, 20.0);
        assert_eq!(s.avg_vd, 20.0);

        let mut s = CongestionState::new();
        update_avg_vd(&mut s, 0.0);
        update_avg_vd(&mut s, 100.0);
        assert!((s.avg_vd - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ewma_converges_geometrically() {
        let mut s = CongestionState::new();
        update_avg_vd(&mut s, 0.0);
        let v = 80.0;
        for _ in 0..50 {
            update_avg_vd(&mut s, v);
        }
        let expect = v * (1.0 - 0.95f64.powi(50));
        assert!((s.avg_vd - expect).abs() < 1e-9, "{} vs {}", s.avg_vd, expect);
        // Convex combination stays within the observed extremes.
        assert!(s.avg_vd >= 0.0 && s.avg_vd <= v);
    }

    #[test]
    fn interval_mapping_branches() {
        assert_eq!(itt_from_vd(0.0), 0.1);
        assert_eq!(itt_from_vd(20.0), 0.1);
        assert_eq!(itt_from_vd(25.0), 0.1);
        assert!((itt_from_vd(100.0) - 0.4).abs() < 1e-12);
        assert!((itt_from_vd(26.0) - 0.104).abs() < 1e-12);
        assert_eq!(itt_from_vd(150.0), 0.6);
        assert_eq!(itt_from_vd(1000.0), 0.6);
    }

    #[test]
    fn interval_always_clamped() {
        for vd in 0..2000 {
            let itt = itt_from_vd(vd as f64 * 0.25);
            assert!((ITT_MIN_S..=ITT_MAX_S).contains(&itt));
        }
    }

    #[test]
    fn period_quantization_rounds_to_nearest() {
        assert_eq!(quantize_rrp_ms(0.1), 100);
        assert_eq!(quantize_rrp_ms(0.101), 100);
        assert_eq!(quantize_rrp_ms(0.149), 100);
        assert_eq!(quantize_rrp_ms(0.155), 200);
        assert_eq!(quantize_rrp_ms(0.24), 200);
        assert_eq!(quantize_rrp_ms(0.25), 300);
        assert_eq!(quantize_rrp_ms(0.387), 400);
        assert_eq!(quantize_rrp_ms(0.6), 600);
        // Floor of one period even for degenerate inputs.
        assert_eq!(quantize_rrp_ms(0.01), 100);
    }

    #[test]
    fn gate_compares_epoch_gap_with_slack() {
        assert!(gate_allows(None, 0, 0.1));
        assert!(gate_allows(Some(1000), 1100, 0.1));
        assert!(!gate_allows(Some(1000), 1099, 0.1), "99 ms < 99.5 ms");
        assert!(gate_allows(Some(1000), 1200, 0.2));
        assert!(!gate_allows(Some(1000), 1100, 0.2), "100 ms gap at 200 ms interval");
    }

    #[test]
    fn quantize_step_reports_period_changes() {
        let mut s = CongestionState::new();
        update_avg_vd(&mut s, 60.0);
        let d = gate_and_quantize(&mut s, 500, true);
        assert!((s.itt_s - 0.24).abs() < 1e-12);
        assert_eq!(d.rrp_ms, 200);
        assert!(d.rrp_changed, "moved off the initial base period");
        assert!(d.transmit);

        let d = gate_and_quantize(&mut s, 700, true);
        assert!(!d.rrp_changed);
    }

    #[test]
    fn disabled_rate_control_pins_the_minimum() {
        let mut s = CongestionState::new();
        update_avg_vd(&mut s, 500.0);
        let d = gate_and_quantize(&mut s, 100, false);
        assert_eq!(s.itt_s, ITT_MIN_S);
        assert_eq!(d.rrp_ms, 100);
        assert!(!d.rrp_changed);
        assert!(d.transmit);
    }
}
