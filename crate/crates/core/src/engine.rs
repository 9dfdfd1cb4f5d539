//! The slot loop: mobility, per-vehicle MAC decisions, link resolution,
//! sensing updates and metric collection, deterministic per seed.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::congestion::{
    gate_allows, gate_and_quantize, itt_from_vd, update_avg_vd, CongestionState, ITT_MIN_S,
};
use crate::error::{ConfigError, SimError};
use crate::metrics::{MetricsCollector, MetricsSummary, PAIR_RANGE_M};
use crate::oneshot::{
    apply_proposed_breakout, check_occupancy, decide_transmission, draw_oneshot_counter,
    Occupancy, OneShotState, Scheme, TransmissionDecision,
};
use crate::phy::{
    decode, dbm_to_mw, link_sample, sample_shadowing_db, DecodeOutcome, PhyConfig,
    SlotTransmission,
};
use crate::scenario::{
    advance, init_placement, local_vehicle_densities, ring_distance, ScenarioConfig,
    VehicleKinematics,
};
use crate::sps::{
    draw_reselection_counter, select_resource, AnnouncedReservation, DecodedTx, Resource,
    SensingMemory, SlotObservation, SpsParams, SpsState, BASE_PERIOD_MS, SLOT_MS,
};

/// Full configuration of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Slot duration in milliseconds; the engine supports the 1 ms grid.
    pub slot_ms: u64,
    pub duration_s: f64,
    /// Leading interval excluded from all metrics.
    pub warmup_s: f64,
    pub scheme: Scheme,
    pub scenario: ScenarioConfig,
    pub phy: PhyConfig,
    pub sps: SpsParams,
    /// Probability of keeping the resource at counter expiry.
    pub p_keep: f64,
    pub congestion_enabled: bool,
    /// Allows occupancy detection from raw energy, not only decodes.
    pub rssi_detection_enabled: bool,
    /// Links longer than this are not evaluated at all.
    pub eval_radius_m: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            slot_ms: SLOT_MS,
            duration_s: 60.0,
            warmup_s: 5.0,
            scheme: Scheme::SpsOnly,
            scenario: ScenarioConfig::default(),
            phy: PhyConfig::default(),
            sps: SpsParams::default(),
            p_keep: 0.8,
            congestion_enabled: true,
            rssi_detection_enabled: true,
            eval_radius_m: 500.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.slot_ms != SLOT_MS {
            return Err(ConfigError::invalid("slot_ms", "only the 1 ms grid is supported"));
        }
        if !(self.duration_s > 0.0) {
            return Err(ConfigError::invalid("duration_s", "must be positive"));
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return Err(ConfigError::invalid(
                "warmup_s",
                "must satisfy 0 <= warmup < duration",
            ));
        }
        if !(0.0..=0.8).contains(&self.p_keep) {
            return Err(ConfigError::invalid("p_keep", "must be within [0, 0.8]"));
        }
        if !(self.eval_radius_m >= PAIR_RANGE_M) {
            return Err(ConfigError::invalid(
                "eval_radius_m",
                format!("must cover the {PAIR_RANGE_M} m metric range"),
            ));
        }
        self.scenario.validate()?;
        self.phy.validate()?;
        self.sps.validate()?;
        Ok(())
    }
}

/// Named independent random streams, all derived from one seed. Placement
/// and speeds are consumed identically by every scheme, so one seed yields
/// one shared mobility trace.
pub struct RngStreams {
    pub placement: ChaCha8Rng,
    pub speeds: ChaCha8Rng,
    pub counters: ChaCha8Rng,
    pub selections: ChaCha8Rng,
    pub shadowing: ChaCha8Rng,
}

pub fn rng_streams(seed: u64) -> RngStreams {
    let stream = |tag: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(tag);
        r
    };
    RngStreams {
        placement: stream(1),
        speeds: stream(2),
        counters: stream(3),
        selections: stream(4),
        shadowing: stream(5),
    }
}

/// One line of the optional per-slot event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Tx {
        slot: u64,
        vehicle: u32,
        slot_in_period: u32,
        tb_index: u32,
        oneshot: bool,
        announced_next_slot: Option<u64>,
        n_receivers: u32,
    },
    Rx {
        slot: u64,
        tx_id: u32,
        rx_id: u32,
        outcome: DecodeOutcome,
        distance_m: f64,
    },
}

/// Completed-run result: configuration echo plus every measured quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scheme: Scheme,
    pub seed: u64,
    pub density_veh_per_km: f64,
    pub n_vehicles: u32,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub congestion_enabled: bool,
    pub p_keep: f64,
    /// Digest of the final vehicle positions; equal across schemes run on
    /// one seed because mobility draws from its own random streams.
    pub mobility_checksum: u64,
    pub config: Option<SimConfig>,
    pub metrics: MetricsSummary,
}

fn mobility_checksum(kinematics: &[VehicleKinematics]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for k in kinematics {
        for bits in [k.position_m.to_bits(), k.speed_mps.to_bits()] {
            h ^= bits;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Inter-reception exceedance table: `gap_ms,ccdf`.
    pub fn pir_csv(&self) -> String {
        let mut out = String::from("gap_ms,ccdf\n");
        for (gap, p) in self.metrics.pir_ccdf() {
            out.push_str(&format!("{gap},{p:.9}\n"));
        }
        out
    }

    /// Reception ratio per distance bin: `bin_center_m,prr,expected,received`.
    pub fn prr_csv(&self) -> String {
        let mut out = String::from("bin_center_m,prr,expected,received\n");
        for b in &self.metrics.prr_bins {
            out.push_str(&format!(
                "{},{:.6},{},{}\n",
                (b.low_m + b.high_m) / 2.0,
                b.prr,
                b.expected,
                b.received
            ));
        }
        out
    }

    /// One closed collision event per row: `run_length`.
    pub fn collisions_csv(&self) -> String {
        let mut out = String::from("run_length\n");
        for r in &self.metrics.event_run_lengths {
            out.push_str(&format!("{r}\n"));
        }
        out
    }

    pub fn summary_csv_header() -> &'static str {
        "scheme,density_veh_per_km,seed,vehicles,duration_s,warmup_s,total_tx,oneshot_tx,\
         breakouts,received,lost_collision,lost_propagation,lost_half_duplex,mean_itt_s,\
         mean_tx_gap_s,total_collisions,collision_events,mean_collisions_per_event,\
         prr_overall,pir_samples,pir_p50_ms,pir_p999_ms,pir_p9999_ms\n"
    }

    pub fn summary_csv_row(&self) -> String {
        let m = &self.metrics;
        let q = |t: f64| m.pir_quantile_ms(t).map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{},{},{:.6},{:.6},{},{},{},{}\n",
            self.scheme,
            self.density_veh_per_km,
            self.seed,
            self.n_vehicles,
            self.duration_s,
            self.warmup_s,
            m.total_tx,
            m.oneshot_tx,
            m.breakout_count,
            m.outcomes.received,
            m.outcomes.lost_collision,
            m.outcomes.lost_propagation,
            m.outcomes.lost_half_duplex,
            m.mean_itt_s,
            m.mean_tx_gap_s,
            m.total_collisions,
            m.collision_events,
            m.mean_collisions_per_event,
            m.prr_overall,
            m.pir_samples,
            q(0.5),
            q(1e-3),
            q(1e-4),
        )
    }
}

/// Fully pinned initial state of one vehicle for closed-world experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedVehicle {
    pub position_m: f64,
    pub speed_mps: f64,
    pub resource: Resource,
    pub first_tx_slot: u64,
    pub rrp_ms: u32,
    pub c_r: u32,
    /// Drawn freshly when absent.
    pub c_o: Option<u32>,
}

/// A hand-built scenario: explicit vehicles, pinned reservation periods, no
/// warmup, optional keep probabilities up to one. Used to realize
/// degenerate setups (forced persistent collisions) that the open world
/// only produces by chance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedScenario {
    pub road_length_m: f64,
    pub vehicles: Vec<ForcedVehicle>,
    pub scheme: Scheme,
    pub p_keep: f64,
    pub duration_s: f64,
    pub phy: PhyConfig,
    pub sps: SpsParams,
    pub rssi_detection_enabled: bool,
    pub eval_radius_m: f64,
    pub seed: u64,
}

impl ForcedScenario {
    pub fn two_vehicle_collision(scheme: Scheme, p_keep: f64, duration_s: f64, seed: u64) -> Self {
        let shared = Resource { slot_in_period: 40, tb_index: 1 };
        let vehicle = |position_m: f64| ForcedVehicle {
            position_m,
            speed_mps: 14.0,
            resource: shared,
            first_tx_slot: 40,
            rrp_ms: 100,
            c_r: 1000,
            c_o: None,
        };
        ForcedScenario {
            road_length_m: 2000.0,
            vehicles: vec![vehicle(0.0), vehicle(100.0)],
            scheme,
            p_keep,
            duration_s,
            phy: PhyConfig::default(),
            sps: SpsParams::default(),
            rssi_detection_enabled: true,
            eval_radius_m: 500.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.vehicles.len() < 2 {
            return Err(ConfigError::invalid("vehicles", "need at least two"));
        }
        if !(0.0..=1.0).contains(&self.p_keep) {
            return Err(ConfigError::invalid("p_keep", "must be within [0, 1]"));
        }
        if !(self.duration_s > 0.0) {
            return Err(ConfigError::invalid("duration_s", "must be positive"));
        }
        if !(self.road_length_m > 0.0) {
            return Err(ConfigError::invalid("road_length_m", "must be positive"));
        }
        self.phy.validate()?;
        self.sps.validate()?;
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.rrp_ms == 0 || v.rrp_ms % BASE_PERIOD_MS as u32 != 0 {
                return Err(ConfigError::invalid(
                    "rrp_ms",
                    format!("vehicle {i}: must be a positive multiple of the base period"),
                ));
            }
            let rrp_slots = v.rrp_ms as u64 * SLOT_MS;
            if v.first_tx_slot % rrp_slots != v.resource.slot_in_period as u64 {
                return Err(ConfigError::invalid(
                    "first_tx_slot",
                    format!("vehicle {i}: not aligned with the resource's period grid"),
                ));
            }
            if v.resource.tb_index >= self.phy.n_transport_blocks() {
                return Err(ConfigError::invalid(
                    "resource",
                    format!("vehicle {i}: block index out of range"),
                ));
            }
        }
        Ok(())
    }
}

struct Vehicle {
    sps: SpsState,
    os: OneShotState,
    cong: CongestionState,
    sensing: SensingMemory,
    next_tx_slot: u64,
    pending_fire: Option<PendingFire>,
    /// Fixed reservation period for closed-world runs; bypasses rate
    /// control entirely.
    pinned_rrp_ms: Option<u32>,
}

struct PendingFire {
    resource: Resource,
    fire_slot: u64,
    announce: Option<AnnouncedReservation>,
}

struct SlotTx {
    vehicle: u32,
    resource: Resource,
    oneshot: bool,
    announce: Option<AnnouncedReservation>,
}

struct Sim<'w> {
    scheme: Scheme,
    p_keep: f64,
    congestion_enabled: bool,
    rssi_detection_enabled: bool,
    eval_radius_m: f64,
    phy: PhyConfig,
    sps_params: SpsParams,
    road_length_m: f64,
    total_slots: u64,
    warmup_slot: u64,
    vehicles: Vec<Vehicle>,
    kinematics: Vec<VehicleKinematics>,
    counters_rng: ChaCha8Rng,
    selections_rng: ChaCha8Rng,
    shadowing_rng: ChaCha8Rng,
    metrics: MetricsCollector,
    trace: Option<&'w mut dyn Write>,
}

/// Runs a configured open-world simulation.
pub fn run(cfg: &SimConfig) -> Result<SimulationReport, SimError> {
    run_traced_impl(cfg, None)
}

/// Same as [`run`] but also writes one JSON line per transmission and per
/// receiver outcome (warmup included) to `trace`.
pub fn run_traced(cfg: &SimConfig, trace: &mut dyn Write) -> Result<SimulationReport, SimError> {
    run_traced_impl(cfg, Some(trace))
}

fn run_traced_impl(
    cfg: &SimConfig,
    trace: Option<&mut dyn Write>,
) -> Result<SimulationReport, SimError> {
    cfg.validate()?;
    let mut streams = rng_streams(cfg.seed);
    let kinematics = init_placement(&cfg.scenario, &mut streams.placement, &mut streams.speeds)?;
    let n = kinematics.len();
    let n_tb = cfg.phy.n_transport_blocks();

    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(n);
    for _ in 0..n {
        vehicles.push(Vehicle {
            sps: SpsState {
                c_r: 0,
                r_sps: Resource { slot_in_period: 0, tb_index: 0 },
            },
            os: OneShotState { c_o: 0, pending_check: None },
            cong: CongestionState::new(),
            sensing: SensingMemory::new(n_tb, &cfg.sps),
            next_tx_slot: 0,
            pending_fire: None,
            pinned_rrp_ms: None,
        });
    }
    // Initial selections: empty histories, so every vehicle picks uniformly
    // in the first window.
    for v in vehicles.iter_mut() {
        let sel = select_resource(
            &v.sensing,
            0,
            BASE_PERIOD_MS as u32,
            &cfg.sps,
            n_tb,
            &mut streams.selections,
        );
        v.sps.r_sps = sel.resource;
        v.next_tx_slot = sel.anchor_slot;
        v.sps.c_r = draw_reselection_counter(BASE_PERIOD_MS as u32, &mut streams.counters);
        if cfg.scheme.uses_oneshot() {
            v.os.c_o = draw_oneshot_counter(&mut streams.counters);
        }
    }

    let mut sim = Sim {
        scheme: cfg.scheme,
        p_keep: cfg.p_keep,
        congestion_enabled: cfg.congestion_enabled,
        rssi_detection_enabled: cfg.rssi_detection_enabled,
        eval_radius_m: cfg.eval_radius_m,
        phy: cfg.phy.clone(),
        sps_params: cfg.sps.clone(),
        road_length_m: cfg.scenario.road_length_m,
        total_slots: (cfg.duration_s * 1000.0).round() as u64,
        warmup_slot: (cfg.warmup_s * 1000.0).round() as u64,
        vehicles,
        kinematics,
        counters_rng: streams.counters,
        selections_rng: streams.selections,
        shadowing_rng: streams.shadowing,
        metrics: MetricsCollector::new(n),
        trace,
    };
    let metrics = sim.run_loop()?;
    let checksum = mobility_checksum(&sim.kinematics);
    Ok(SimulationReport {
        scheme: cfg.scheme,
        seed: cfg.seed,
        density_veh_per_km: cfg.scenario.density_veh_per_km,
        n_vehicles: n as u32,
        duration_s: cfg.duration_s,
        warmup_s: cfg.warmup_s,
        congestion_enabled: cfg.congestion_enabled,
        p_keep: cfg.p_keep,
        mobility_checksum: checksum,
        config: Some(cfg.clone()),
        metrics,
    })
}

/// Runs a closed-world scenario with explicit initial state, no warmup and
/// pinned reservation periods.
pub fn run_forced(forced: &ForcedScenario) -> Result<SimulationReport, SimError> {
    run_forced_impl(forced, None)
}

/// Same as [`run_forced`] but with the per-slot event trace.
pub fn run_forced_traced(
    forced: &ForcedScenario,
    trace: &mut dyn Write,
) -> Result<SimulationReport, SimError> {
    run_forced_impl(forced, Some(trace))
}

fn run_forced_impl(
    forced: &ForcedScenario,
    trace: Option<&mut dyn Write>,
) -> Result<SimulationReport, SimError> {
    forced.validate()?;
    let mut streams = rng_streams(forced.seed);
    let n = forced.vehicles.len();
    let n_tb = forced.phy.n_transport_blocks();

    let kinematics: Vec<VehicleKinematics> = forced
        .vehicles
        .iter()
        .enumerate()
        .map(|(id, v)| VehicleKinematics {
            id: id as u32,
            position_m: v.position_m.rem_euclid(forced.road_length_m),
            speed_mps: v.speed_mps,
        })
        .collect();
    let vehicles: Vec<Vehicle> = forced
        .vehicles
        .iter()
        .map(|fv| {
            let mut cong = CongestionState::new();
            cong.rrp_ms = fv.rrp_ms;
            cong.itt_s = fv.rrp_ms as f64 / 1000.0;
            Vehicle {
                sps: SpsState {
                    c_r: fv.c_r,
                    r_sps: fv.resource,
                },
                os: OneShotState {
                    c_o: fv.c_o.unwrap_or_else(|| draw_oneshot_counter(&mut streams.counters)),
                    pending_check: None,
                },
                cong,
                sensing: SensingMemory::new(n_tb, &forced.sps),
                next_tx_slot: fv.first_tx_slot,
                pending_fire: None,
                pinned_rrp_ms: Some(fv.rrp_ms),
            }
        })
        .collect();

    let mut sim = Sim {
        scheme: forced.scheme,
        p_keep: forced.p_keep,
        congestion_enabled: false,
        rssi_detection_enabled: forced.rssi_detection_enabled,
        eval_radius_m: forced.eval_radius_m,
        phy: forced.phy.clone(),
        sps_params: forced.sps.clone(),
        road_length_m: forced.road_length_m,
        total_slots: (forced.duration_s * 1000.0).round() as u64,
        warmup_slot: 0,
        vehicles,
        kinematics,
        counters_rng: streams.counters,
        selections_rng: streams.selections,
        shadowing_rng: streams.shadowing,
        metrics: MetricsCollector::new(n),
        trace,
    };
    let metrics = sim.run_loop()?;
    let checksum = mobility_checksum(&sim.kinematics);
    Ok(SimulationReport {
        scheme: forced.scheme,
        seed: forced.seed,
        density_veh_per_km: n as f64 / forced.road_length_m * 1000.0,
        n_vehicles: n as u32,
        duration_s: forced.duration_s,
        warmup_s: 0.0,
        congestion_enabled: false,
        p_keep: forced.p_keep,
        mobility_checksum: checksum,
        config: None,
        metrics,
    })
}

impl<'w> Sim<'w> {
    fn run_loop(&mut self) -> Result<MetricsSummary, SimError> {
        let n = self.vehicles.len();
        let n_tb = self.phy.n_transport_blocks() as usize;
        let dt_s = SLOT_MS as f64 / 1000.0;
        let mut slot_txs: Vec<SlotTx> = Vec::with_capacity(n);
        let mut rssi_scratch = vec![0.0f64; n_tb];
        let mut link_scratch: Vec<SlotTransmission> = Vec::with_capacity(8);
        let mut distance_scratch: Vec<f64> = Vec::with_capacity(8);
        let mut receiver_counts: Vec<u32> = Vec::with_capacity(8);

        for slot in 0..self.total_slots {
            advance(&mut self.kinematics, dt_s, self.road_length_m);

            if slot % BASE_PERIOD_MS == 0 {
                let densities = local_vehicle_densities(&self.kinematics, self.road_length_m);
                for (i, v) in self.vehicles.iter_mut().enumerate() {
                    update_avg_vd(&mut v.cong, densities[i] as f64);
                    if slot >= self.warmup_slot {
                        let itt = match v.pinned_rrp_ms {
                            Some(r) => r as f64 / 1000.0,
                            None if self.congestion_enabled => itt_from_vd(v.cong.avg_vd),
                            None => ITT_MIN_S,
                        };
                        self.metrics.record_itt_sample(itt);
                    }
                }
            }

            slot_txs.clear();
            for id in 0..n {
                if let Some(tx) = self.step_vehicle(id as u32, slot) {
                    slot_txs.push(tx);
                }
            }

            self.resolve_slot(
                slot,
                &slot_txs,
                &mut rssi_scratch,
                &mut link_scratch,
                &mut distance_scratch,
                &mut receiver_counts,
            )?;
        }
        // Drain the collector by swapping in an empty one.
        let collector = std::mem::replace(&mut self.metrics, MetricsCollector::new(0));
        Ok(collector.finalize())
    }

    /// Fires any pending one-shot and processes the vehicle's grid
    /// opportunity. Returns the transmission this vehicle makes in `slot`.
    fn step_vehicle(&mut self, id: u32, slot: u64) -> Option<SlotTx> {
        let n_tb = self.phy.n_transport_blocks();

        let mut broke_out = false;
        let fired = {
            let v = &mut self.vehicles[id as usize];
            match &v.pending_fire {
                Some(p) if p.fire_slot == slot => {
                    let p = v.pending_fire.take().expect("just matched");
                    let mut announce = p.announce;
                    if self.scheme == Scheme::Proposed {
                        if let Some(check) = v.os.pending_check {
                            let occupancy =
                                check.outcome.expect("probe listened before the one-shot fires");
                            let new_anchor = apply_proposed_breakout(
                                &mut v.sps,
                                &mut v.os,
                                occupancy,
                                &v.sensing,
                                slot,
                                v.cong.rrp_ms,
                                &self.sps_params,
                                n_tb,
                                &mut self.counters_rng,
                                &mut self.selections_rng,
                            );
                            if let Some(anchor) = new_anchor {
                                debug_assert_eq!(occupancy, Occupancy::Occupied);
                                v.next_tx_slot = anchor;
                                broke_out = true;
                                // The one-shot's control information now
                                // advertises the replacement reservation, so
                                // neighbours exclude the new cell right away.
                                announce = Some(AnnouncedReservation {
                                    next_slot: anchor,
                                    tb_index: v.sps.r_sps.tb_index,
                                    rrp_ms: v.cong.rrp_ms,
                                });
                            }
                        }
                    }
                    Some(SlotTx {
                        vehicle: id,
                        resource: p.resource,
                        oneshot: true,
                        announce,
                    })
                }
                _ => None,
            }
        };
        if fired.is_some() {
            if slot >= self.warmup_slot {
                self.metrics.record_transmission(id, slot, true);
                if broke_out {
                    self.metrics.record_breakout();
                }
            }
            // A fire and a grid opportunity can share a slot only when a
            // re-selected anchor lands inside the one-shot span; the gate
            // rejects that opportunity below, so the fire stands alone.
        }

        let v = &mut self.vehicles[id as usize];
        if v.next_tx_slot != slot {
            return fired;
        }

        let (transmit, rrp_changed, rrp_ms) = match v.pinned_rrp_ms {
            Some(r) => (
                gate_allows(v.cong.last_msg_epoch_slot, slot, r as f64 / 1000.0),
                false,
                r,
            ),
            None => {
                let d = gate_and_quantize(&mut v.cong, slot, self.congestion_enabled);
                (d.transmit, d.rrp_changed, d.rrp_ms)
            }
        };

        if rrp_changed {
            // The reservation is meaningless on a new period grid:
            // re-select into it and start a fresh counter, transmitting
            // nothing this slot.
            let sel = select_resource(
                &v.sensing,
                slot,
                rrp_ms,
                &self.sps_params,
                n_tb,
                &mut self.selections_rng,
            );
            v.sps.r_sps = sel.resource;
            v.sps.c_r = draw_reselection_counter(rrp_ms, &mut self.counters_rng);
            v.next_tx_slot = sel.anchor_slot;
            return fired;
        }
        if !transmit {
            // Rate-gated: skip the opportunity without consuming counters.
            v.next_tx_slot = slot + rrp_ms as u64 * SLOT_MS;
            return fired;
        }

        let decision = decide_transmission(
            self.scheme,
            &mut v.sps,
            &mut v.os,
            &v.sensing,
            slot,
            rrp_ms,
            self.p_keep,
            true,
            &self.sps_params,
            n_tb,
            &mut self.counters_rng,
            &mut self.selections_rng,
        );
        v.next_tx_slot = decision.next_opportunity_slot();
        match decision {
            TransmissionDecision::Reserved { next_opportunity_slot } => {
                debug_assert!(fired.is_none(), "one transmission per vehicle per slot");
                debug_assert_eq!(
                    slot % (rrp_ms as u64 * SLOT_MS),
                    v.sps.r_sps.slot_in_period as u64,
                    "reserved grid misaligned"
                );
                v.cong.last_msg_epoch_slot = Some(slot);
                if slot >= self.warmup_slot {
                    self.metrics.record_transmission(id, slot, false);
                }
                Some(SlotTx {
                    vehicle: id,
                    resource: v.sps.r_sps,
                    oneshot: false,
                    announce: Some(AnnouncedReservation {
                        next_slot: next_opportunity_slot,
                        tb_index: v.sps.r_sps.tb_index,
                        rrp_ms,
                    }),
                })
            }
            TransmissionDecision::OneShot { resource, fire_slot, announce, .. } => {
                v.cong.last_msg_epoch_slot = Some(slot);
                v.pending_fire = Some(PendingFire { resource, fire_slot, announce });
                fired
            }
            TransmissionDecision::SilentReselect { .. } => fired,
        }
    }

    /// Resolves every link of the slot: decode outcomes, metrics, sensing
    /// input and armed occupancy probes.
    #[allow(clippy::too_many_arguments)]
    fn resolve_slot(
        &mut self,
        slot: u64,
        slot_txs: &[SlotTx],
        rssi_scratch: &mut [f64],
        link_scratch: &mut Vec<SlotTransmission>,
        distance_scratch: &mut Vec<f64>,
        receiver_counts: &mut Vec<u32>,
    ) -> Result<(), SimError> {
        let n = self.vehicles.len();
        let per_tb = self.phy.subchannels_per_tb;
        let post_warmup = slot >= self.warmup_slot;

        // Collision accounting among the transmitters themselves.
        if post_warmup {
            for i in 0..slot_txs.len() {
                for j in (i + 1)..slot_txs.len() {
                    let (a, b) = (&slot_txs[i], &slot_txs[j]);
                    if a.resource.tb_index != b.resource.tb_index {
                        continue;
                    }
                    let d = ring_distance(
                        self.kinematics[a.vehicle as usize].position_m,
                        self.kinematics[b.vehicle as usize].position_m,
                        self.road_length_m,
                    );
                    if d <= self.eval_radius_m {
                        self.metrics.record_collision_pair(
                            a.vehicle,
                            b.vehicle,
                            a.resource.tb_index,
                            slot,
                            self.vehicles[a.vehicle as usize].cong.rrp_ms,
                            self.vehicles[b.vehicle as usize].cong.rrp_ms,
                        );
                    }
                }
            }
        }

        receiver_counts.clear();
        receiver_counts.resize(slot_txs.len(), 0);

        for rx in 0..n {
            let rx_id = rx as u32;
            let transmits = slot_txs.iter().any(|t| t.vehicle == rx_id);

            // Per-receiver link budget for every in-range transmission.
            link_scratch.clear();
            distance_scratch.clear();
            rssi_scratch.iter_mut().for_each(|v| *v = 0.0);
            for (ti, t) in slot_txs.iter().enumerate() {
                if t.vehicle == rx_id {
                    continue;
                }
                let d = ring_distance(
                    self.kinematics[t.vehicle as usize].position_m,
                    self.kinematics[rx].position_m,
                    self.road_length_m,
                );
                if d > self.eval_radius_m {
                    continue;
                }
                receiver_counts[ti] += 1;
                let shadowing =
                    sample_shadowing_db(self.phy.shadowing_stddev_los_db, &mut self.shadowing_rng);
                let link = link_sample(d, shadowing, &self.phy);
                link_scratch.push(SlotTransmission {
                    tx_id: t.vehicle,
                    first_subchannel: t.resource.tb_index * per_tb,
                    n_subchannels: per_tb,
                    rx_power_dbm: link.rx_power_dbm,
                });
                distance_scratch.push(link.distance_m);
                if !transmits {
                    rssi_scratch[t.resource.tb_index as usize] += dbm_to_mw(link.rx_power_dbm);
                }
            }

            // Outcomes for each audible transmission.
            let mut decodes: Vec<DecodedTx> = Vec::new();
            for target in 0..link_scratch.len() {
                let outcome = decode(target, link_scratch, transmits, &self.phy);
                let tx_id = link_scratch[target].tx_id;
                let distance = distance_scratch[target];
                if post_warmup {
                    self.metrics
                        .record_outcome(tx_id, rx_id, slot, outcome, distance);
                }
                if let Some(w) = self.trace.as_deref_mut() {
                    let line = serde_json::to_string(&TraceEvent::Rx {
                        slot,
                        tx_id,
                        rx_id,
                        outcome,
                        distance_m: distance,
                    })
                    .expect("trace serialization cannot fail");
                    writeln!(w, "{line}")?;
                }
                if outcome == DecodeOutcome::Received {
                    let t = slot_txs
                        .iter()
                        .find(|t| t.vehicle == tx_id)
                        .expect("decoded transmission exists");
                    decodes.push(DecodedTx {
                        tx_id,
                        tb_index: t.resource.tb_index,
                        rx_power_dbm: link_scratch[target].rx_power_dbm,
                        reservation: t.announce,
                    });
                }
            }

            // Sensing input: transmit slots are blind, listened slots store
            // energy and decoded reservations.
            let v = &mut self.vehicles[rx];
            if transmits {
                v.sensing.mark_transmitted(slot)?;
            } else {
                v.sensing.observe_rssi_mw(slot, rssi_scratch)?;
                for d in &decodes {
                    v.sensing.record_decode(slot, d);
                }
                if let Some(check) = v.os.pending_check {
                    if check.outcome.is_none() && check.listen_slot == slot {
                        let obs = SlotObservation {
                            slot,
                            rssi_dbm_per_tb: rssi_scratch
                                .iter()
                                .map(|&mw| crate::phy::mw_to_dbm(mw))
                                .collect(),
                            decodes: decodes.clone(),
                        };
                        let verdict = check_occupancy(
                            &check,
                            &obs,
                            self.rssi_detection_enabled,
                            self.phy.rssi_busy_threshold_dbm,
                        );
                        if let Some(c) = v.os.pending_check.as_mut() {
                            c.outcome = Some(verdict);
                        }
                    }
                }
            }
        }

        if let Some(w) = self.trace.as_deref_mut() {
            for (ti, t) in slot_txs.iter().enumerate() {
                let line = serde_json::to_string(&TraceEvent::Tx {
                    slot,
                    vehicle: t.vehicle,
                    slot_in_period: t.resource.slot_in_period,
                    tb_index: t.resource.tb_index,
                    oneshot: t.oneshot,
                    announced_next_slot: t.announce.map(|a| a.next_slot),
                    n_receivers: receiver_counts[ti],
                })
                .expect("trace serialization cannot fail");
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SimConfig {
        SimConfig {
            duration_s: 3.0,
            warmup_s: 1.0,
            scenario: ScenarioConfig {
                road_length_m: 500.0,
                density_veh_per_km: 40.0,
                ..ScenarioConfig::default()
            },
            seed: 7,
            ..SimConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = SimConfig::default();
        c.p_keep = 0.9;
        assert!(c.validate().is_err(), "keep probability above the cap");
        let mut c = SimConfig::default();
        c.warmup_s = 60.0;
        assert!(c.validate().is_err(), "warmup must be shorter than the run");
        let mut c = SimConfig::default();
        c.slot_ms = 2;
        assert!(c.validate().is_err(), "only the 1 ms grid");
        let mut c = SimConfig::default();
        c.eval_radius_m = 200.0;
        assert!(c.validate().is_err(), "evaluation must cover the metric range");
        assert!(SimConfig::default().validate().is_ok());
    }

    #[test]
    fn smoke_run_produces_activity() {
        let report = run(&small_cfg()).unwrap();
        assert_eq!(report.n_vehicles, 20);
        assert!(report.metrics.total_tx > 200, "20 vehicles, 2 s measured");
        assert!(report.metrics.outcomes.received > 0);
        assert!(report.metrics.prr_overall > 0.5);
    }

    #[test]
    fn identical_seeds_reproduce_identical_reports() {
        let a = run(&small_cfg()).unwrap();
        let b = run(&small_cfg()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn different_seeds_differ() {
        let a = run(&small_cfg()).unwrap();
        let mut cfg = small_cfg();
        cfg.seed = 8;
        let b = run(&cfg).unwrap();
        assert_ne!(a.metrics.total_tx, b.metrics.total_tx);
    }

    #[test]
    fn disabled_rate_control_reports_the_base_interval() {
        let mut cfg = small_cfg();
        cfg.congestion_enabled = false;
        let report = run(&cfg).unwrap();
        assert!((report.metrics.mean_itt_s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn forced_pair_with_certain_keep_collides_forever() {
        let forced =
            ForcedScenario::two_vehicle_collision(Scheme::SpsOnly, 1.0, 2.0, 3);
        let report = run_forced(&forced).unwrap();
        assert_eq!(report.metrics.collision_events, 1);
        assert_eq!(report.metrics.event_run_lengths, vec![20]);
        assert_eq!(report.metrics.outcomes.received, 0, "every packet collides");
    }

    #[test]
    fn forced_pair_under_enhanced_scheme_breaks_out() {
        let forced =
            ForcedScenario::two_vehicle_collision(Scheme::Proposed, 1.0, 3.0, 3);
        let report = run_forced(&forced).unwrap();
        let max_run = *report.metrics.event_run_lengths.iter().max().unwrap();
        assert!(
            max_run <= 6,
            "one-shot counter bounds every run, got {:?}",
            report.metrics.event_run_lengths
        );
        assert!(report.metrics.outcomes.received > 0, "traffic resumes after breakout");
    }

    #[test]
    fn trace_lines_parse_and_conserve_outcomes() {
        let mut cfg = small_cfg();
        cfg.duration_s = 1.0;
        cfg.warmup_s = 0.0;
        let mut buf: Vec<u8> = Vec::new();
        let report = run_traced(&cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut tx_receivers = 0u64;
        let mut rx_lines = 0u64;
        let mut tx_lines = 0u64;
        for line in text.lines() {
            match serde_json::from_str::<TraceEvent>(line).unwrap() {
                TraceEvent::Tx { n_receivers, .. } => {
                    tx_lines += 1;
                    tx_receivers += n_receivers as u64;
                }
                TraceEvent::Rx { .. } => rx_lines += 1,
            }
        }
        assert_eq!(tx_lines, report.metrics.total_tx);
        assert_eq!(rx_lines, tx_receivers, "one outcome per in-range receiver");
    }

    #[test]
    fn report_csv_shapes() {
        let report = run(&small_cfg()).unwrap();
        let pir = report.pir_csv();
        assert!(pir.starts_with("gap_ms,ccdf\n"));
        let prr = report.prr_csv();
        assert_eq!(prr.lines().count(), 17, "header plus 16 bins");
        assert!(prr.lines().nth(1).unwrap().starts_with("10,"));
        let sum = report.summary_csv_row();
        assert_eq!(
            sum.trim_end().split(',').count(),
            SimulationReport::summary_csv_header().trim_end().split(',').count()
        );
    }
}
