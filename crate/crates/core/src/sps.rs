//! Semi-persistent scheduling: sensing memory, candidate ranking and
//! resource selection.
//!
//! Time is organised in 1 ms slots. Each vehicle owns one single-slot
//! resource per reservation period and keeps it for a counted number of
//! transmissions. When the counter runs out the resource is kept with
//! probability `p_keep`, otherwise a new one is picked from a selection
//! window using the sliding sensing history: resources reserved by decoded
//! neighbours are excluded (with threshold relaxation when too few remain)
//! and the final choice is uniform over the quietest fifth of what is left.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, SimError};
use crate::phy::{dbm_to_mw, mw_to_dbm};

/// Slot duration in milliseconds. The engine steps one slot at a time.
pub const SLOT_MS: u64 = 1;
/// Base messaging period in milliseconds. Reservation periods are integer
/// multiples of this and the selection window is exactly one base period.
pub const BASE_PERIOD_MS: u64 = 100;

/// One single-slot resource inside a vehicle's reservation-period grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resource {
    /// Slot offset within the owner's reservation period.
    pub slot_in_period: u32,
    /// Which transport block of the slot.
    pub tb_index: u32,
}

/// Tunables for sensing and selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpsParams {
    /// Length of the sliding sensing history in milliseconds.
    pub sensing_window_ms: u64,
    /// Width of the selection window in milliseconds.
    pub selection_window_ms: u64,
    /// Initial power level above which a decoded reservation excludes a
    /// candidate, in dBm.
    pub exclusion_threshold_dbm: f64,
    /// Threshold relaxation step applied while too few candidates survive,
    /// in dB.
    pub exclusion_relax_db: f64,
    /// Fraction of the window that must survive exclusion, and the fraction
    /// of survivors eligible for the final uniform choice.
    pub best_fraction: f64,
}

impl Default for SpsParams {
    fn default() -> Self {
        SpsParams {
            sensing_window_ms: 1000,
            selection_window_ms: BASE_PERIOD_MS,
            exclusion_threshold_dbm: -110.0,
            exclusion_relax_db: 3.0,
            best_fraction: 0.2,
        }
    }
}

impl SpsParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.selection_window_ms != BASE_PERIOD_MS {
            return Err(ConfigError::invalid(
                "sps.selection_window_ms",
                format!("must equal the {BASE_PERIOD_MS} ms base period"),
            ));
        }
        if self.sensing_window_ms == 0 || self.sensing_window_ms % BASE_PERIOD_MS != 0 {
            return Err(ConfigError::invalid(
                "sps.sensing_window_ms",
                "must be a positive multiple of the base period",
            ));
        }
        if !(self.best_fraction > 0.0 && self.best_fraction <= 1.0) {
            return Err(ConfigError::invalid("sps.best_fraction", "must be in (0, 1]"));
        }
        if !(self.exclusion_relax_db > 0.0) {
            return Err(ConfigError::invalid("sps.exclusion_relax_db", "must be > 0"));
        }
        Ok(())
    }
}

/// Reservation carried in a decoded packet: where the sender will transmit
/// next and how often it repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnouncedReservation {
    pub next_slot: u64,
    pub tb_index: u32,
    pub rrp_ms: u32,
}

/// One successfully decoded packet as input to sensing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedTx {
    pub tx_id: u32,
    pub tb_index: u32,
    pub rx_power_dbm: f64,
    pub reservation: Option<AnnouncedReservation>,
}

/// Everything one vehicle heard in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotObservation {
    pub slot: u64,
    /// Total received power per transport block, `NEG_INFINITY` when idle.
    pub rssi_dbm_per_tb: Vec<f64>,
    pub decodes: Vec<DecodedTx>,
}

// ===== Sensing memory =====

const NO_SAMPLE: f64 = -1.0;
/// Recent decode powers kept per neighbour for the reservation-strength
/// estimate.
const POWER_SAMPLES: usize = 10;

#[derive(Debug, Clone)]
struct NeighborReservation {
    next_slot: u64,
    tb_index: u32,
    rrp_ms: u32,
    last_decode_slot: u64,
    power_slots: [u32; POWER_SAMPLES],
    power_mw: [f32; POWER_SAMPLES],
    power_len: u8,
    power_head: u8,
}

impl NeighborReservation {
    fn push_power(&mut self, slot: u64, mw: f64) {
        let i = self.power_head as usize;
        self.power_slots[i] = slot as u32;
        self.power_mw[i] = mw as f32;
        self.power_head = ((i + 1) % POWER_SAMPLES) as u8;
        if (self.power_len as usize) < POWER_SAMPLES {
            self.power_len += 1;
        }
    }

    /// Average decode power over the sensing window, in dBm.
    fn mean_power_dbm(&self, now: u64, window_slots: u64) -> f64 {
        let oldest = now.saturating_sub(window_slots);
        let mut sum = 0.0f64;
        let mut count = 0u32;
        for i in 0..self.power_len as usize {
            if self.power_slots[i] as u64 >= oldest {
                sum += self.power_mw[i] as f64;
                count += 1;
            }
        }
        if count == 0 {
            f64::NEG_INFINITY
        } else {
            mw_to_dbm(sum / count as f64)
        }
    }
}

/// Sliding per-resource history of channel energy and decoded reservations.
///
/// Energy is remembered on the base-period grid: each of the
/// `100 x n_tb` cells holds the samples from the last
/// `sensing_window / 100 ms` occurrences. A slot in which the owner itself
/// transmitted contributes no sample for any block of that slot.
#[derive(Debug, Clone)]
pub struct SensingMemory {
    n_tb: usize,
    window_periods: usize,
    window_slots: u64,
    /// Linear-power samples, `NO_SAMPLE` where the owner was deaf;
    /// layout `[cell * window_periods + period_index]` with
    /// `cell = (slot % 100) * n_tb + tb`.
    rssi_mw: Vec<f64>,
    reservations: HashMap<u32, NeighborReservation>,
    last_slot: Option<u64>,
}

impl SensingMemory {
    pub fn new(n_tb: u32, params: &SpsParams) -> Self {
        let window_periods = (params.sensing_window_ms / BASE_PERIOD_MS) as usize;
        SensingMemory {
            n_tb: n_tb as usize,
            window_periods,
            window_slots: params.sensing_window_ms / SLOT_MS,
            rssi_mw: vec![NO_SAMPLE; BASE_PERIOD_MS as usize * n_tb as usize * window_periods],
            reservations: HashMap::new(),
            last_slot: None,
        }
    }

    fn check_order(&mut self, slot: u64) -> Result<(), SimError> {
        if let Some(last) = self.last_slot {
            if slot <= last {
                return Err(SimError::Internal(format!(
                    "sensing fed out of order: slot {slot} after {last}"
                )));
            }
        }
        self.last_slot = Some(slot);
        Ok(())
    }

    fn sample_base(&self, slot: u64) -> usize {
        let period_index = (slot / BASE_PERIOD_MS) as usize % self.window_periods;
        let cell0 = (slot % BASE_PERIOD_MS) as usize * self.n_tb;
        cell0 * self.window_periods + period_index
    }

    /// Records the per-block energy of one listened slot, linear milliwatts.
    pub fn observe_rssi_mw(&mut self, slot: u64, rssi_mw: &[f64]) -> Result<(), SimError> {
        debug_assert_eq!(rssi_mw.len(), self.n_tb);
        self.check_order(slot)?;
        let base = self.sample_base(slot);
        for (tb, &mw) in rssi_mw.iter().enumerate() {
            self.rssi_mw[base + tb * self.window_periods] = mw;
        }
        Ok(())
    }

    /// Marks a slot in which the owner transmitted: half duplex leaves no
    /// observation, and any year-old sample for these cells must not
    /// survive either.
    pub fn mark_transmitted(&mut self, slot: u64) -> Result<(), SimError> {
        self.check_order(slot)?;
        let base = self.sample_base(slot);
        for tb in 0..self.n_tb {
            self.rssi_mw[base + tb * self.window_periods] = NO_SAMPLE;
        }
        Ok(())
    }

    /// Stores a decoded packet: refreshes the sender's announced
    /// reservation, or just its power history when the packet carried none.
    pub fn record_decode(&mut self, slot: u64, decode: &DecodedTx) {
        let mw = dbm_to_mw(decode.rx_power_dbm);
        let entry = self
            .reservations
            .entry(decode.tx_id)
            .or_insert(NeighborReservation {
                next_slot: 0,
                tb_index: 0,
                rrp_ms: 0,
                last_decode_slot: slot,
                power_slots: [0; POWER_SAMPLES],
                power_mw: [0.0; POWER_SAMPLES],
                power_len: 0,
                power_head: 0,
            });
        entry.last_decode_slot = slot;
        entry.push_power(slot, mw);
        if let Some(res) = decode.reservation {
            entry.next_slot = res.next_slot;
            entry.tb_index = res.tb_index;
            entry.rrp_ms = res.rrp_ms;
        } else if entry.rrp_ms == 0 {
            // Never announced anything usable yet; keep the entry only for
            // its power history.
            entry.next_slot = u64::MAX;
        }
    }

    /// Convenience wrapper feeding one whole observation.
    pub fn update(&mut self, obs: &SlotObservation) -> Result<(), SimError> {
        let mw: Vec<f64> = obs.rssi_dbm_per_tb.iter().map(|&d| dbm_to_mw(d)).collect();
        self.observe_rssi_mw(obs.slot, &mw)?;
        for d in &obs.decodes {
            self.record_decode(obs.slot, d);
        }
        Ok(())
    }

    /// Mean sensed power of a base-grid cell over the window, linear mW.
    /// Cells never observed rank as perfectly quiet.
    pub fn mean_rssi_mw(&self, slot_in_base_period: u64, tb: u32) -> f64 {
        let cell = (slot_in_base_period % BASE_PERIOD_MS) as usize * self.n_tb + tb as usize;
        let base = cell * self.window_periods;
        let mut sum = 0.0f64;
        let mut count = 0u32;
        for p in 0..self.window_periods {
            let v = self.rssi_mw[base + p];
            if v != NO_SAMPLE {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn mean_rssi_dbm(&self, slot_in_base_period: u64, tb: u32) -> f64 {
        mw_to_dbm(self.mean_rssi_mw(slot_in_base_period, tb))
    }

    /// Reservation-strength estimate for one neighbour, if it is still
    /// fresh within the sensing window.
    fn fresh_reservations(&self, now: u64) -> impl Iterator<Item = &NeighborReservation> {
        let window = self.window_slots;
        self.reservations
            .values()
            .filter(move |r| now.saturating_sub(r.last_decode_slot) <= window && r.rrp_ms != 0)
    }
}

// ===== Selection =====

/// Result of one resource selection.
#[derive(Debug, Clone)]
pub struct Selection {
    pub resource: Resource,
    /// Absolute slot of the resource's first occurrence.
    pub anchor_slot: u64,
    /// The recommended set: the quietest `best_fraction` of the exclusion
    /// survivors, ties included. The returned resource is one of these.
    pub candidates: Vec<Resource>,
}

/// Draws a fresh re-selection counter for the given reservation period.
/// The admissible range scales inversely with the period so that a full
/// counter run covers roughly the same wall-clock span at any rate.
pub fn draw_reselection_counter(rrp_ms: u32, rng: &mut impl Rng) -> u32 {
    let m = rrp_ms.max(20) as u64;
    let lo = (500 + m - 1) / m;
    let hi = 1500 / m;
    rng.gen_range(lo..=hi) as u32
}

/// Bernoulli keep decision at counter expiry.
pub fn roll_keep(p_keep: f64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < p_keep
}

/// Picks a resource in the window `(now, now + 100 ms]`.
///
/// Candidates reserved by a decoded neighbour whose power estimate exceeds
/// the exclusion threshold are removed; while fewer than `best_fraction` of
/// the window survives, the threshold is relaxed step by step. The final
/// choice is uniform over the quietest `best_fraction` of survivors, ties
/// included, so a cold start with an empty history is uniform over the
/// whole window.
pub fn select_resource(
    sensing: &SensingMemory,
    now: u64,
    rrp_ms: u32,
    params: &SpsParams,
    n_tb: u32,
    rng: &mut impl Rng,
) -> Selection {
    let window_slots = params.selection_window_ms / SLOT_MS;
    select_in_span(sensing, now, now + 1, window_slots, rrp_ms, params, n_tb, rng)
}

/// The same recommendation procedure over an arbitrary run of consecutive
/// slots starting at `first_slot`: exclusion of decoded reservations above
/// the (relaxing) threshold, then a uniform draw among the quietest
/// `best_fraction` of the survivors, ties included. `now` anchors the
/// freshness checks of the sensing history.
#[allow(clippy::too_many_arguments)]
pub fn select_in_span(
    sensing: &SensingMemory,
    now: u64,
    first_slot: u64,
    span_slots: u64,
    rrp_ms: u32,
    params: &SpsParams,
    n_tb: u32,
    rng: &mut impl Rng,
) -> Selection {
    let win_lo = first_slot;
    let win_hi = first_slot + span_slots - 1;
    let total = (span_slots as usize) * n_tb as usize;
    let needed = ((params.best_fraction * total as f64).ceil() as usize).max(1);

    let mut excluded = vec![false; total];
    let mut survivors: Vec<u32> = Vec::with_capacity(total);
    let mut threshold = params.exclusion_threshold_dbm;
    loop {
        excluded.iter_mut().for_each(|e| *e = false);
        let mut any_excluded = false;
        for res in sensing.fresh_reservations(now) {
            if res.tb_index >= n_tb || res.next_slot == u64::MAX {
                continue;
            }
            if res.mean_power_dbm(now, sensing.window_slots) <= threshold {
                continue;
            }
            let rrp_slots = (res.rrp_ms as u64 * SLOT_MS).max(1);
            // Project the announced pattern forward into the window.
            let mut s = res.next_slot;
            if s < win_lo {
                let k = (win_lo - s + rrp_slots - 1) / rrp_slots;
                s += k * rrp_slots;
            }
            while s <= win_hi {
                let idx = ((s - win_lo) as usize) * n_tb as usize + res.tb_index as usize;
                if !excluded[idx] {
                    excluded[idx] = true;
                    any_excluded = true;
                }
                s += rrp_slots;
            }
        }
        survivors.clear();
        survivors.extend(
            (0..total as u32).filter(|&i| !excluded[i as usize]),
        );
        if survivors.len() >= needed || !any_excluded {
            break;
        }
        threshold += params.exclusion_relax_db;
    }

    // Rank the survivors by sensed energy, quietest first. Ties all enter
    // the eligible set together.
    let mut ranked: Vec<(f64, u32)> = survivors
        .iter()
        .map(|&i| {
            let slot = win_lo + (i as u64 / n_tb as u64);
            let tb = i % n_tb;
            (sensing.mean_rssi_mw(slot % BASE_PERIOD_MS, tb), i)
        })
        .collect();
    ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let quota = ((params.best_fraction * ranked.len() as f64).ceil() as usize)
        .clamp(1, ranked.len());
    let cutoff = ranked[quota - 1].0;
    let eligible = ranked.partition_point(|&(mw, _)| mw <= cutoff);

    let pick = ranked[rng.gen_range(0..eligible)].1;
    let rrp_slots = rrp_ms as u64 * SLOT_MS;
    let to_resource = |i: u32| {
        let slot = win_lo + (i as u64 / n_tb as u64);
        Resource {
            slot_in_period: (slot % rrp_slots) as u32,
            tb_index: i % n_tb,
        }
    };
    let anchor_slot = win_lo + (pick as u64 / n_tb as u64);
    Selection {
        resource: to_resource(pick),
        anchor_slot,
        candidates: ranked[..eligible].iter().map(|&(_, i)| to_resource(i)).collect(),
    }
}

// ===== Per-vehicle scheduling state =====

/// Semi-persistent scheduling state of one vehicle.
#[derive(Debug, Clone)]
pub struct SpsState {
    /// Transmissions left before the next keep-or-reselect decision.
    pub c_r: u32,
    pub r_sps: Resource,
}

/// What a counter expiry decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpiryOutcome {
    pub kept: bool,
    /// First occurrence of the (kept or new) resource after `now`.
    pub next_anchor_slot: u64,
}

/// Handles a re-selection counter hitting zero: keep the resource with
/// probability `p_keep`, otherwise select a new one; the counter is redrawn
/// either way. On a keep the next occurrence stays on the period grid; on a
/// re-selection it moves to the new anchor inside the selection window.
#[allow(clippy::too_many_arguments)]
pub fn on_counter_expiry(
    sps: &mut SpsState,
    sensing: &SensingMemory,
    now: u64,
    rrp_ms: u32,
    p_keep: f64,
    params: &SpsParams,
    n_tb: u32,
    counter_rng: &mut impl Rng,
    selection_rng: &mut impl Rng,
) -> ExpiryOutcome {
    let kept = roll_keep(p_keep, counter_rng);
    let next_anchor_slot = if kept {
        now + rrp_ms as u64 * SLOT_MS
    } else {
        let sel = select_resource(sensing, now, rrp_ms, params, n_tb, selection_rng);
        sps.r_sps = sel.resource;
        sel.anchor_slot
    };
    sps.c_r = draw_reselection_counter(rrp_ms, counter_rng);
    ExpiryOutcome {
        kept,
        next_anchor_slot,
    }
}
