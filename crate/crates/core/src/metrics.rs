//! Run metrics: packet inter-reception time, reception-ratio distance
//! bins, persistent-collision events and rate-control summaries.
//!
//! The collector is fed slot by slot while the simulation runs and is
//! folded into an order-stable [`MetricsSummary`] at the end, so two runs
//! with the same seed serialize byte-identically.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::phy::DecodeOutcome;

/// Pair metrics (reception ratio, inter-reception time) only consider
/// transmitter-receiver pairs within this range, meters.
pub const PAIR_RANGE_M: f64 = 320.0;
/// Width of one reception-ratio distance bin, meters.
pub const PRR_BIN_WIDTH_M: f64 = 20.0;
/// Number of reception-ratio bins covering `(0, PAIR_RANGE_M]`.
pub const PRR_BINS: usize = 16;

const NO_SLOT: u32 = u32::MAX;

/// Per-receiver decode outcome tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub received: u64,
    pub lost_collision: u64,
    pub lost_propagation: u64,
    pub lost_half_duplex: u64,
}

impl OutcomeCounts {
    pub fn total(&self) -> u64 {
        self.received + self.lost_collision + self.lost_propagation + self.lost_half_duplex
    }
}

/// One reception-ratio distance bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrrBin {
    pub low_m: f64,
    pub high_m: f64,
    pub expected: u64,
    pub received: u64,
    pub prr: f64,
}

/// One inter-reception-gap histogram entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PirHistEntry {
    pub gap_ms: u32,
    pub count: u64,
}

/// Everything measured over one run, order-stable and serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub total_tx: u64,
    pub reserved_tx: u64,
    pub oneshot_tx: u64,
    /// Occupancy probes that came back busy and forced a re-selection.
    pub breakout_count: u64,
    pub outcomes: OutcomeCounts,
    /// Commanded inter-transmission interval averaged over vehicles and
    /// rate-control epochs.
    pub mean_itt_s: f64,
    pub itt_samples: u64,
    /// Realized gap between consecutive transmissions of one vehicle,
    /// averaged over all vehicles.
    pub mean_tx_gap_s: f64,
    pub tx_gap_samples: u64,
    pub total_collisions: u64,
    pub collision_events: u64,
    pub mean_collisions_per_event: f64,
    /// Run length of every closed collision event, ascending.
    pub event_run_lengths: Vec<u32>,
    pub prr_bins: Vec<PrrBin>,
    pub prr_overall: f64,
    /// Inter-reception gap histogram, ascending by gap.
    pub pir_hist: Vec<PirHistEntry>,
    pub pir_samples: u64,
}

impl MetricsSummary {
    /// Empirical P(gap > g) for each distinct gap, ascending.
    pub fn pir_ccdf(&self) -> Vec<(u32, f64)> {
        if self.pir_samples == 0 {
            return Vec::new();
        }
        let total = self.pir_samples as f64;
        let mut above = self.pir_samples;
        self.pir_hist
            .iter()
            .map(|e| {
                above -= e.count;
                (e.gap_ms, above as f64 / total)
            })
            .collect()
    }

    /// Smallest gap whose exceedance probability is at most `tail`; the
    /// distribution maximum for `tail = 0`.
    pub fn pir_quantile_ms(&self, tail: f64) -> Option<u32> {
        if self.pir_samples == 0 {
            return None;
        }
        let allowed = (tail * self.pir_samples as f64).floor() as u64;
        let mut above = 0u64;
        for e in self.pir_hist.iter().rev() {
            above += e.count;
            if above > allowed {
                return Some(e.gap_ms);
            }
        }
        Some(self.pir_hist[0].gap_ms)
    }

    /// Mean inter-reception gap in milliseconds.
    pub fn pir_mean_ms(&self) -> f64 {
        if self.pir_samples == 0 {
            return 0.0;
        }
        let sum: f64 = self
            .pir_hist
            .iter()
            .map(|e| e.gap_ms as f64 * e.count as f64)
            .sum();
        sum / self.pir_samples as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct EventState {
    expected_next_slot: u64,
    run: u32,
}

/// Accumulates raw per-slot facts during a run. The engine only feeds it
/// after warmup, so every chain and counter starts clean.
#[derive(Debug)]
pub struct MetricsCollector {
    n: usize,
    // Inter-reception chains, slot of the last reception per ordered pair.
    last_rx_slot: Vec<u32>,
    pir_hist: HashMap<u32, u64>,
    pir_samples: u64,
    prr_expected: [u64; PRR_BINS],
    prr_received: [u64; PRR_BINS],
    outcomes: OutcomeCounts,
    // Keyed by (low id, high id, block, slot phase): an event tracks one
    // contested resource, so a race collision on some other cell between
    // the same pair starts its own event.
    active_events: HashMap<(u32, u32, u32, u64), EventState>,
    closed_runs: Vec<u32>,
    total_collisions: u64,
    itt_sum: f64,
    itt_samples: u64,
    last_tx_slot: Vec<u32>,
    gap_sum_ms: u64,
    gap_samples: u64,
    total_tx: u64,
    reserved_tx: u64,
    oneshot_tx: u64,
    breakouts: u64,
}

impl MetricsCollector {
    pub fn new(n_vehicles: usize) -> Self {
        MetricsCollector {
            n: n_vehicles,
            last_rx_slot: vec![NO_SLOT; n_vehicles * n_vehicles],
            pir_hist: HashMap::new(),
            pir_samples: 0,
            prr_expected: [0; PRR_BINS],
            prr_received: [0; PRR_BINS],
            outcomes: OutcomeCounts::default(),
            active_events: HashMap::new(),
            closed_runs: Vec::new(),
            total_collisions: 0,
            itt_sum: 0.0,
            itt_samples: 0,
            last_tx_slot: vec![NO_SLOT; n_vehicles],
            gap_sum_ms: 0,
            gap_samples: 0,
            total_tx: 0,
            reserved_tx: 0,
            oneshot_tx: 0,
            breakouts: 0,
        }
    }

    fn bin_index(distance_m: f64) -> usize {
        if distance_m <= 0.0 {
            0
        } else {
            ((distance_m / PRR_BIN_WIDTH_M).ceil() as usize - 1).min(PRR_BINS - 1)
        }
    }

    /// Feeds one decode outcome. Outcomes beyond the pair range carry no
    /// ratio or gap statistics, but they break the pair's reception chain:
    /// a gap spanning an out-of-range excursion is not a valid sample.
    pub fn record_outcome(
        &mut self,
        tx_id: u32,
        rx_id: u32,
        slot: u64,
        outcome: DecodeOutcome,
        distance_m: f64,
    ) {
        debug_assert_ne!(tx_id, rx_id);
        let pair = tx_id as usize * self.n + rx_id as usize;
        if distance_m > PAIR_RANGE_M {
            self.last_rx_slot[pair] = NO_SLOT;
            return;
        }
        match outcome {
            DecodeOutcome::Received => self.outcomes.received += 1,
            DecodeOutcome::LostCollision => self.outcomes.lost_collision += 1,
            DecodeOutcome::LostPropagation => self.outcomes.lost_propagation += 1,
            DecodeOutcome::LostHalfDuplex => self.outcomes.lost_half_duplex += 1,
        }
        let bin = Self::bin_index(distance_m);
        self.prr_expected[bin] += 1;
        if outcome == DecodeOutcome::Received {
            self.prr_received[bin] += 1;
            let last = self.last_rx_slot[pair];
            if last != NO_SLOT {
                let gap = (slot - last as u64) as u32;
                *self.pir_hist.entry(gap).or_insert(0) += 1;
                self.pir_samples += 1;
            }
            self.last_rx_slot[pair] = slot as u32;
        }
    }

    /// Feeds one busy-probe verdict that forced a re-selection.
    pub fn record_breakout(&mut self) {
        self.breakouts += 1;
    }

    /// Feeds one transmission for gap accounting.
    pub fn record_transmission(&mut self, tx_id: u32, slot: u64, oneshot: bool) {
        self.total_tx += 1;
        if oneshot {
            self.oneshot_tx += 1;
        } else {
            self.reserved_tx += 1;
        }
        let last = self.last_tx_slot[tx_id as usize];
        if last != NO_SLOT {
            self.gap_sum_ms += slot - last as u64;
            self.gap_samples += 1;
        }
        self.last_tx_slot[tx_id as usize] = slot as u32;
    }

    /// Feeds one colliding transmission pair. Consecutive collisions of the
    /// same pair on the same resource (block and slot phase) chain into an
    /// event; the chain expects the next collision one longer reservation
    /// period ahead, and a missed expectation closes the event when the
    /// pair next collides.
    pub fn record_collision_pair(
        &mut self,
        a: u32,
        b: u32,
        tb_index: u32,
        slot: u64,
        rrp_a_ms: u32,
        rrp_b_ms: u32,
    ) {
        self.total_collisions += 1;
        let period = rrp_a_ms.max(rrp_b_ms) as u64;
        let key = (a.min(b), a.max(b), tb_index, slot % period);
        match self.active_events.get_mut(&key) {
            Some(ev) if slot <= ev.expected_next_slot => {
                ev.run += 1;
                ev.expected_next_slot = slot + period;
            }
            Some(ev) => {
                self.closed_runs.push(ev.run);
                *ev = EventState {
                    expected_next_slot: slot + period,
                    run: 1,
                };
            }
            None => {
                self.active_events.insert(
                    key,
                    EventState {
                        expected_next_slot: slot + period,
                        run: 1,
                    },
                );
            }
        }
    }

    /// Feeds one commanded-interval sample (one vehicle, one epoch).
    pub fn record_itt_sample(&mut self, itt_s: f64) {
        self.itt_sum += itt_s;
        self.itt_samples += 1;
    }

    /// Closes open events and folds everything into the summary.
    pub fn finalize(mut self) -> MetricsSummary {
        self.closed_runs
            .extend(self.active_events.values().map(|e| e.run));
        self.closed_runs.sort_unstable();

        let prr_bins: Vec<PrrBin> = (0..PRR_BINS)
            .map(|i| {
                let expected = self.prr_expected[i];
                let received = self.prr_received[i];
                PrrBin {
                    low_m: i as f64 * PRR_BIN_WIDTH_M,
                    high_m: (i + 1) as f64 * PRR_BIN_WIDTH_M,
                    expected,
                    received,
                    prr: if expected == 0 {
                        0.0
                    } else {
                        received as f64 / expected as f64
                    },
                }
            })
            .collect();
        let expected_total: u64 = self.prr_expected.iter().sum();
        let received_total: u64 = self.prr_received.iter().sum();

        let mut pir_hist: Vec<PirHistEntry> = self
            .pir_hist
            .iter()
            .map(|(&gap_ms, &count)| PirHistEntry { gap_ms, count })
            .collect();
        pir_hist.sort_unstable_by_key(|e| e.gap_ms);

        let events = self.closed_runs.len() as u64;
        MetricsSummary {
            total_tx: self.total_tx,
            reserved_tx: self.reserved_tx,
            oneshot_tx: self.oneshot_tx,
            breakout_count: self.breakouts,
            outcomes: self.outcomes,
            mean_itt_s: if self.itt_samples == 0 {
                0.0
            } else {
                self.itt_sum / self.itt_samples as f64
            },
            itt_samples: self.itt_samples,
            mean_tx_gap_s: if self.gap_samples == 0 {
                0.0
            } else {
                self.gap_sum_ms as f64 / self.gap_samples as f64 / 1000.0
            },
            tx_gap_samples: self.gap_samples,
            total_collisions: self.total_collisions,
            collision_events: events,
            mean_collisions_per_event: if events == 0 {
                0.0
            } else {
                self.closed_runs.iter().map(|&r| r as u64).sum::<u64>() as f64 / events as f64
            },
            event_run_lengths: self.closed_runs,
            prr_bins,
            prr_overall: if expected_total == 0 {
                0.0
            } else {
                received_total as f64 / expected_total as f64
            },
            pir_hist,
            pir_samples: self.pir_samples,
        }
    }
}
