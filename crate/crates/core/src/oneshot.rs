//! One-shot transmission logic layered on top of semi-persistent
//! scheduling, plus the occupancy-probe enhancement.
//!
//! Schemes build on each other. Plain scheduling only ever transmits on the
//! reserved resource. The one-shot scheme adds a second counter `c_o`;
//! whenever it runs out the next message is diverted to a nearby
//! non-reserved resource, which briefly makes the vehicle visible to anyone
//! it persistently collides with. The enhanced scheme additionally listens
//! on the vacated reserved slot during such a diversion and abandons the
//! resource immediately when somebody else is heard on it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sps::{
    draw_reselection_counter, roll_keep, select_in_span, select_resource, AnnouncedReservation,
    Resource, SensingMemory, SlotObservation, SpsParams, SpsState, SLOT_MS,
};

/// Width of the diversion span: a one-shot lands one to three slots after
/// the reserved occurrence it replaces.
pub const ONESHOT_SPAN_SLOTS: u64 = 3;

/// Which MAC behaviour a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Reserved transmissions only.
    SpsOnly,
    /// Adds the one-shot counter.
    #[serde(rename = "one_shot")]
    OneShotJ3161,
    /// One-shot plus occupancy detection and immediate re-selection.
    Proposed,
}

impl Scheme {
    pub fn uses_oneshot(self) -> bool {
        !matches!(self, Scheme::SpsOnly)
    }

    pub const ALL: [Scheme; 3] = [Scheme::SpsOnly, Scheme::OneShotJ3161, Scheme::Proposed];
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::SpsOnly => "sps_only",
            Scheme::OneShotJ3161 => "one_shot",
            Scheme::Proposed => "proposed",
        };
        f.write_str(s)
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sps_only" | "sps" => Ok(Scheme::SpsOnly),
            "one_shot" | "oneshot" => Ok(Scheme::OneShotJ3161),
            "proposed" => Ok(Scheme::Proposed),
            other => Err(format!(
                "unknown scheme '{other}' (expected sps_only, one_shot or proposed)"
            )),
        }
    }
}

/// Result of listening on the vacated reserved slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occupancy {
    Occupied,
    Free,
}

/// Armed while a one-shot diversion is in flight: listen on the vacated
/// reserved occurrence and remember what was heard until the one-shot
/// fires.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingOccupancyCheck {
    pub resource: Resource,
    pub listen_slot: u64,
    pub outcome: Option<Occupancy>,
}

/// One-shot side of a vehicle's MAC state.
#[derive(Debug, Clone, PartialEq)]
pub struct OneShotState {
    /// Reserved transmissions left before the next one-shot diversion.
    pub c_o: u32,
    pub pending_check: Option<PendingOccupancyCheck>,
}

impl OneShotState {
    pub fn new(rng: &mut impl Rng) -> Self {
        OneShotState {
            c_o: draw_oneshot_counter(rng),
            pending_check: None,
        }
    }
}

/// Uniform one-shot counter draw.
pub fn draw_oneshot_counter(rng: &mut impl Rng) -> u32 {
    rng.gen_range(2..=6)
}

/// What the MAC decided at one transmission opportunity.
#[derive(Debug, Clone, PartialEq)]
pub enum TransmissionDecision {
    /// Transmit now on the reserved resource.
    Reserved { next_opportunity_slot: u64 },
    /// Divert this period's message to `resource`, transmitted at
    /// `fire_slot`. The packet announces the reserved resource it will
    /// return to, unless a breakout cancels that at fire time.
    OneShot {
        resource: Resource,
        fire_slot: u64,
        announce: Option<AnnouncedReservation>,
        arm_check: bool,
        next_opportunity_slot: u64,
    },
    /// Re-selection without a keep: nothing is transmitted this period and
    /// the new resource first occurs at `next_opportunity_slot`.
    SilentReselect { next_opportunity_slot: u64 },
}

impl TransmissionDecision {
    pub fn next_opportunity_slot(&self) -> u64 {
        match self {
            TransmissionDecision::Reserved { next_opportunity_slot }
            | TransmissionDecision::OneShot { next_opportunity_slot, .. }
            | TransmissionDecision::SilentReselect { next_opportunity_slot } => {
                *next_opportunity_slot
            }
        }
    }
}

/// Picks the one-shot resource: the regular recommendation procedure run
/// over the three slots right after the reserved occurrence, so the
/// diversion prefers blocks that currently sound free. A cold history
/// degrades to a uniform draw over the span. Returns the resource and its
/// absolute transmit slot.
pub fn select_oneshot_resource(
    sensing: &SensingMemory,
    rrp_ms: u32,
    params: &SpsParams,
    n_tb: u32,
    now: u64,
    rng: &mut impl Rng,
) -> (Resource, u64) {
    let sel = select_in_span(
        sensing,
        now,
        now + 1,
        ONESHOT_SPAN_SLOTS,
        rrp_ms,
        params,
        n_tb,
        rng,
    );
    (sel.resource, sel.anchor_slot)
}

/// Runs the counter state machine at one transmission opportunity and
/// returns what to send. All counter mutation happens here: a reserved
/// transmission consumes one tick of every active counter (fresh draws
/// included), one-shots consume none, and silent re-selections start their
/// counters untouched at the new anchor.
#[allow(clippy::too_many_arguments)]
pub fn decide_transmission(
    scheme: Scheme,
    sps: &mut SpsState,
    os: &mut OneShotState,
    sensing: &SensingMemory,
    now: u64,
    rrp_ms: u32,
    p_keep: f64,
    moving: bool,
    params: &SpsParams,
    n_tb: u32,
    counter_rng: &mut impl Rng,
    selection_rng: &mut impl Rng,
) -> TransmissionDecision {
    let rrp_slots = rrp_ms as u64 * SLOT_MS;
    let oneshot_due = scheme.uses_oneshot() && os.c_o == 0;

    if oneshot_due {
        let (r_os, fire_slot) =
            select_oneshot_resource(sensing, rrp_ms, params, n_tb, now, selection_rng);
        os.c_o = draw_oneshot_counter(counter_rng);
        let mut arm_check = false;
        let next_anchor = if sps.c_r == 0 {
            // Counter expiry and one-shot in the same opportunity: the
            // one-shot carries the message while the reserved resource is
            // kept or moved for future periods.
            let kept = roll_keep(p_keep, counter_rng);
            let anchor = if kept {
                now + rrp_slots
            } else {
                let sel = select_resource(sensing, now, rrp_ms, params, n_tb, selection_rng);
                sps.r_sps = sel.resource;
                sel.anchor_slot
            };
            sps.c_r = draw_reselection_counter(rrp_ms, counter_rng);
            anchor
        } else {
            // Plain diversion: the reserved resource and its counter sit
            // untouched for one period. Only the enhanced scheme listens
            // on the vacated occurrence.
            if scheme == Scheme::Proposed {
                os.pending_check = Some(PendingOccupancyCheck {
                    resource: sps.r_sps,
                    listen_slot: now,
                    outcome: None,
                });
                arm_check = true;
            }
            now + rrp_slots
        };
        return TransmissionDecision::OneShot {
            resource: r_os,
            fire_slot,
            announce: Some(AnnouncedReservation {
                next_slot: next_anchor,
                tb_index: sps.r_sps.tb_index,
                rrp_ms,
            }),
            arm_check,
            next_opportunity_slot: next_anchor,
        };
    }

    if sps.c_r == 0 {
        let kept = roll_keep(p_keep, counter_rng);
        if kept {
            // Keep and transmit now; the fresh counters pay for this
            // transmission immediately.
            sps.c_r = draw_reselection_counter(rrp_ms, counter_rng) - 1;
            if scheme.uses_oneshot() {
                os.c_o = if moving {
                    draw_oneshot_counter(counter_rng) - 1
                } else {
                    os.c_o - 1
                };
            }
            TransmissionDecision::Reserved {
                next_opportunity_slot: now + rrp_slots,
            }
        } else {
            let sel = select_resource(sensing, now, rrp_ms, params, n_tb, selection_rng);
            sps.r_sps = sel.resource;
            sps.c_r = draw_reselection_counter(rrp_ms, counter_rng);
            if scheme.uses_oneshot() && moving {
                os.c_o = draw_oneshot_counter(counter_rng);
            }
            TransmissionDecision::SilentReselect {
                next_opportunity_slot: sel.anchor_slot,
            }
        }
    } else {
        sps.c_r -= 1;
        if scheme.uses_oneshot() {
            os.c_o -= 1;
        }
        TransmissionDecision::Reserved {
            next_opportunity_slot: now + rrp_slots,
        }
    }
}

/// Decides whether the vacated reserved slot was in use by somebody else:
/// either a packet was decoded on the same block, or raw energy on it
/// exceeded the busy threshold (when energy detection is enabled).
pub fn check_occupancy(
    check: &PendingOccupancyCheck,
    observation: &SlotObservation,
    rssi_detection_enabled: bool,
    rssi_busy_threshold_dbm: f64,
) -> Occupancy {
    debug_assert_eq!(observation.slot, check.listen_slot);
    let tb = check.resource.tb_index;
    let decoded = observation.decodes.iter().any(|d| d.tb_index == tb);
    let busy = rssi_detection_enabled
        && observation.rssi_dbm_per_tb[tb as usize] > rssi_busy_threshold_dbm;
    if decoded || busy {
        Occupancy::Occupied
    } else {
        Occupancy::Free
    }
}

/// Applies the occupancy verdict once the one-shot has fired. An occupied
/// reserved resource is abandoned on the spot: unconditional re-selection,
/// both counters redrawn. Returns the new resource's first slot when that
/// happened.
#[allow(clippy::too_many_arguments)]
pub fn apply_proposed_breakout(
    sps: &mut SpsState,
    os: &mut OneShotState,
    occupancy: Occupancy,
    sensing: &SensingMemory,
    now: u64,
    rrp_ms: u32,
    params: &SpsParams,
    n_tb: u32,
    counter_rng: &mut impl Rng,
    selection_rng: &mut impl Rng,
) -> Option<u64> {
    os.pending_check = None;
    match occupancy {
        Occupancy::Free => None,
        Occupancy::Occupied => {
            let sel = select_resource(sensing, now, rrp_ms, params, n_tb, selection_rng);
            sps.r_sps = sel.resource;
            sps.c_r = draw_reselection_counter(rrp_ms, counter_rng);
            os.c_o = draw_oneshot_counter(counter_rng);
            Some(sel.anchor_slot)
        }
    }
}
