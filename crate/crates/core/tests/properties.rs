//! Randomized invariant checks: slot physics, counter ranges, rate-control
//! clamps, metric conservation and selection exclusion rules.

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sidelink_core::congestion::{gate_allows, itt_from_vd, quantize_rrp_ms, update_avg_vd,
    CongestionState};
use sidelink_core::engine::TraceEvent;
use sidelink_core::metrics::MetricsCollector;
use sidelink_core::oneshot::{draw_oneshot_counter, Scheme};
use sidelink_core::phy::DecodeOutcome;
use sidelink_core::scenario::{ring_distance, ScenarioConfig};
use sidelink_core::sps::{draw_reselection_counter, select_resource, AnnouncedReservation,
    DecodedTx, SensingMemory, SpsParams};
use sidelink_core::{run_traced, SimConfig};

proptest! {
    #[test]
    fn ring_distance_is_symmetric_and_bounded(
        a in 0.0f64..5000.0,
        b in 0.0f64..5000.0,
        l in 100.0f64..5000.0,
    ) {
        let a = a % l;
        let b = b % l;
        let d = ring_distance(a, b, l);
        prop_assert!((d - ring_distance(b, a, l)).abs() < 1e-9);
        prop_assert!(d >= 0.0 && d <= l / 2.0 + 1e-9);
        prop_assert!(ring_distance(a, a, l) == 0.0);
    }

    #[test]
    fn reselection_counters_stay_in_the_period_scaled_range(
        rrp_idx in 1u32..=6,
        seed in 0u64..1000,
    ) {
        let rrp_ms = rrp_idx * 100;
        let m = rrp_ms.max(20) as u64;
        let lo = (500 + m - 1) / m;
        let hi = 1500 / m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let c = draw_reselection_counter(rrp_ms, &mut rng) as u64;
            prop_assert!(c >= lo && c <= hi, "c={c} outside [{lo}, {hi}] for {rrp_ms} ms");
        }
    }

    #[test]
    fn oneshot_counters_stay_in_range(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let c = draw_oneshot_counter(&mut rng);
            prop_assert!((2..=6).contains(&c));
        }
    }

    #[test]
    fn commanded_interval_is_clamped_and_quantized(vd in 0.0f64..10_000.0) {
        let itt = itt_from_vd(vd);
        prop_assert!((0.1..=0.6).contains(&itt));
        let rrp = quantize_rrp_ms(itt);
        prop_assert!(rrp % 100 == 0 && (100..=600).contains(&rrp));
        prop_assert_eq!(rrp, 100 * ((itt / 0.1).round() as u32).max(1));
    }

    #[test]
    fn density_smoothing_stays_between_sample_and_history(
        first in 0.0f64..500.0,
        second in 0.0f64..500.0,
    ) {
        let mut state = CongestionState::new();
        update_avg_vd(&mut state, first);
        prop_assert!((state.avg_vd - first).abs() < 1e-12, "first sample seeds directly");
        update_avg_vd(&mut state, second);
        let (lo, hi) = (first.min(second), first.max(second));
        prop_assert!(state.avg_vd >= lo - 1e-12 && state.avg_vd <= hi + 1e-12);
    }

    #[test]
    fn rate_gate_opens_exactly_at_the_interval(
        last in 0u64..100_000,
        gap_ms in 0u64..1200,
        itt_tenths in 1u32..=6,
    ) {
        let itt = itt_tenths as f64 / 10.0;
        let allowed = gate_allows(Some(last), last + gap_ms, itt);
        let expected = gap_ms as f64 / 1000.0 >= itt - 0.0005;
        prop_assert_eq!(allowed, expected);
        prop_assert!(gate_allows(None, last, itt), "first message is never gated");
    }

    #[test]
    fn selection_lands_in_window_and_avoids_strong_reservations(
        seed in 0u64..500,
        reserved in proptest::collection::vec((1u64..=100, 0u32..5), 1..4),
    ) {
        let params = SpsParams::default();
        let mut memory = SensingMemory::new(5, &params);
        let now = 1000u64;
        memory.observe_rssi_mw(now, &[0.0; 5]).unwrap();
        let mut excluded = HashSet::new();
        for (i, &(offset, tb)) in reserved.iter().enumerate() {
            let next_slot = now + offset;
            memory.record_decode(now, &DecodedTx {
                tx_id: 100 + i as u32,
                tb_index: tb,
                rx_power_dbm: -80.0,
                reservation: Some(AnnouncedReservation { next_slot, tb_index: tb, rrp_ms: 100 }),
            });
            excluded.insert((next_slot, tb));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sel = select_resource(&memory, now, 100, &params, 5, &mut rng);
        prop_assert!(sel.anchor_slot > now && sel.anchor_slot <= now + 100);
        prop_assert!(!excluded.contains(&(sel.anchor_slot, sel.resource.tb_index)),
            "picked a strongly reserved resource");
        prop_assert!(sel.candidates.contains(&sel.resource));
        prop_assert!(sel.candidates.len() >= 100, "recommendation smaller than the quota");
    }

    #[test]
    fn collision_events_conserve_the_collision_count(
        feed in proptest::collection::vec((0usize..3, 0u32..3, 1u64..40), 1..60),
    ) {
        let mut collector = MetricsCollector::new(3);
        let pairs = [(0u32, 1u32), (0, 2), (1, 2)];
        let mut slot = 0u64;
        for (pair_idx, tb, gap) in feed {
            slot += gap * 10;
            let (a, b) = pairs[pair_idx];
            collector.record_collision_pair(a, b, tb, slot, 100, 100);
        }
        let summary = collector.finalize();
        let total_runs: u64 = summary.event_run_lengths.iter().map(|&r| r as u64).sum();
        prop_assert_eq!(total_runs, summary.total_collisions);
        prop_assert!(summary.event_run_lengths.iter().all(|&r| r >= 1));
    }

    #[test]
    fn reception_gap_quantiles_grow_as_the_tail_shrinks(
        gaps in proptest::collection::vec(1u64..2000, 2..60),
    ) {
        let mut collector = MetricsCollector::new(2);
        let mut slot = 0u64;
        for gap in gaps {
            slot += gap;
            collector.record_outcome(0, 1, slot, DecodeOutcome::Received, 100.0);
        }
        let summary = collector.finalize();
        let tails = [0.5, 0.1, 0.01, 0.001];
        let qs: Vec<_> = tails.iter().map(|&t| summary.pir_quantile_ms(t)).collect();
        for w in qs.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                prop_assert!(a <= b, "smaller tails must not shrink the quantile");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn small_worlds_respect_slot_physics(
        seed in 0u64..10_000,
        n_per_km in 20.0f64..60.0,
        scheme_idx in 0usize..3,
    ) {
        let cfg = SimConfig {
            duration_s: 1.5,
            warmup_s: 0.0,
            scheme: [Scheme::SpsOnly, Scheme::OneShotJ3161, Scheme::Proposed][scheme_idx],
            scenario: ScenarioConfig {
                road_length_m: 400.0,
                density_veh_per_km: n_per_km,
                ..ScenarioConfig::default()
            },
            seed,
            ..SimConfig::default()
        };
        let mut buf = Vec::new();
        let report = run_traced(&cfg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let mut tx_slots: HashSet<(u64, u32)> = HashSet::new();
        let mut expected_rx = 0u64;
        let mut events = Vec::new();
        for line in text.lines() {
            let event: TraceEvent = serde_json::from_str(line).unwrap();
            if let TraceEvent::Tx { slot, vehicle, n_receivers, .. } = event {
                prop_assert!(tx_slots.insert((slot, vehicle)),
                    "vehicle {vehicle} transmitted twice in slot {slot}");
                expected_rx += n_receivers as u64;
            }
            events.push(event);
        }
        let mut rx_count = 0u64;
        for event in &events {
            if let TraceEvent::Rx { slot, rx_id, outcome, .. } = event {
                rx_count += 1;
                let busy = tx_slots.contains(&(*slot, *rx_id));
                prop_assert_eq!(busy, *outcome == DecodeOutcome::LostHalfDuplex,
                    "half-duplex outcomes exactly when the receiver transmits");
            }
        }
        prop_assert_eq!(rx_count, expected_rx, "one outcome per in-range receiver");

        for bin in &report.metrics.prr_bins {
            prop_assert!((0.0..=1.0).contains(&bin.prr));
        }
        prop_assert!((0.0..=1.0).contains(&report.metrics.prr_overall));
        let mean_itt = report.metrics.mean_itt_s;
        prop_assert!(mean_itt >= 0.1 - 1e-9 && mean_itt <= 0.6 + 1e-9,
            "commanded interval mean {mean_itt} escaped the clamp");
    }
}

#[test]
fn reception_ratio_declines_with_distance() {
    let cfg = SimConfig {
        duration_s: 4.0,
        warmup_s: 1.0,
        scenario: ScenarioConfig {
            road_length_m: 1000.0,
            density_veh_per_km: 60.0,
            ..ScenarioConfig::default()
        },
        seed: 9,
        ..SimConfig::default()
    };
    let report = sidelink_core::run(&cfg).unwrap();
    let bins = &report.metrics.prr_bins;
    let near: f64 = bins[..4].iter().map(|b| b.prr).sum::<f64>() / 4.0;
    let far: f64 = bins[12..].iter().map(|b| b.prr).sum::<f64>() / 4.0;
    assert!(
        near > far,
        "reception must degrade with distance: near {near:.3} far {far:.3}"
    );
    assert!(bins.iter().all(|b| b.expected > 0), "every bin is populated");
}
