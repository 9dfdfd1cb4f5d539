//! Ring-road scenario: vehicle placement, constant-speed motion and
//! neighbourhood density.
//!
//! The road is a circle of configurable length, so positions wrap around and
//! there are no edge effects. Distances are always the shorter way around
//! the ring.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Radius used when counting neighbours for the vehicle-density input of
/// congestion control, in meters.
pub const DENSITY_RADIUS_M: f64 = 100.0;

/// Minimum speed after clamping a Gaussian draw, in m/s. With the default
/// mean and deviation a non-positive draw is a 16-sigma event, so the clamp
/// exists only to keep the motion model well defined.
const MIN_SPEED_MPS: f64 = 0.1;

/// Static description of the traffic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Circumference of the ring road in meters.
    pub road_length_m: f64,
    /// Linear vehicle density in vehicles per kilometer.
    pub density_veh_per_km: f64,
    /// Mean vehicle speed in km/h.
    pub speed_mean_kmh: f64,
    /// Standard deviation of vehicle speed in km/h.
    pub speed_stddev_kmh: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            road_length_m: 2000.0,
            density_veh_per_km: 100.0,
            speed_mean_kmh: 50.0,
            speed_stddev_kmh: 3.0,
        }
    }
}

impl ScenarioConfig {
    /// Number of vehicles implied by the density and road length.
    pub fn vehicle_count(&self) -> usize {
        (self.density_veh_per_km * self.road_length_m / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.road_length_m > 0.0) {
            return Err(ConfigError::invalid("scenario.road_length_m", "must be > 0"));
        }
        if !(self.density_veh_per_km > 0.0) {
            return Err(ConfigError::invalid(
                "scenario.density_veh_per_km",
                "must be > 0",
            ));
        }
        if !(self.speed_stddev_kmh >= 0.0) {
            return Err(ConfigError::invalid(
                "scenario.speed_stddev_kmh",
                "must be >= 0",
            ));
        }
        if !(self.speed_mean_kmh > 0.0) {
            return Err(ConfigError::invalid("scenario.speed_mean_kmh", "must be > 0"));
        }
        if self.vehicle_count() < 2 {
            return Err(ConfigError::invalid(
                "scenario.density_veh_per_km",
                "scenario must contain at least 2 vehicles",
            ));
        }
        Ok(())
    }
}

/// Position and speed of one vehicle. Speeds are constant for the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleKinematics {
    pub id: u32,
    /// Position along the ring in meters, in `[0, road_length)`.
    pub position_m: f64,
    pub speed_mps: f64,
}

/// Draws initial positions and speeds. Positions are uniform on the ring,
/// speeds Gaussian in km/h converted to m/s and clamped positive. Position
/// and speed draws come from separate streams so that one can be varied
/// without disturbing the other.
pub fn init_placement(
    cfg: &ScenarioConfig,
    placement_rng: &mut impl Rng,
    speed_rng: &mut impl Rng,
) -> Result<Vec<VehicleKinematics>, ConfigError> {
    cfg.validate()?;
    let n = cfg.vehicle_count();
    let speed_dist = Normal::new(cfg.speed_mean_kmh, cfg.speed_stddev_kmh)
        .map_err(|e| ConfigError::invalid("scenario.speed_stddev_kmh", e.to_string()))?;
    let mut vehicles = Vec::with_capacity(n);
    for id in 0..n as u32 {
        let position_m = placement_rng.gen_range(0.0..cfg.road_length_m);
        let speed_mps = (speed_dist.sample(speed_rng) / 3.6).max(MIN_SPEED_MPS);
        vehicles.push(VehicleKinematics {
            id,
            position_m,
            speed_mps,
        });
    }
    Ok(vehicles)
}

/// Moves every vehicle forward by `dt_s` seconds, wrapping at the ring end.
pub fn advance(vehicles: &mut [VehicleKinematics], dt_s: f64, road_length_m: f64) {
    for v in vehicles {
        v.position_m = (v.position_m + v.speed_mps * dt_s).rem_euclid(road_length_m);
    }
}

/// Shortest separation between two ring positions.
pub fn ring_distance(a_m: f64, b_m: f64, road_length_m: f64) -> f64 {
    let d = (a_m - b_m).abs();
    d.min(road_length_m - d)
}

/// Number of other vehicles within [`DENSITY_RADIUS_M`] of the given one,
/// boundary inclusive.
pub fn local_vehicle_density(
    self_id: u32,
    vehicles: &[VehicleKinematics],
    road_length_m: f64,
) -> usize {
    let me = vehicles
        .iter()
        .find(|v| v.id == self_id)
        .expect("unknown vehicle id");
    vehicles
        .iter()
        .filter(|v| {
            v.id != self_id
                && ring_distance(v.position_m, me.position_m, road_length_m) <= DENSITY_RADIUS_M
        })
        .count()
}

/// Neighbour counts for all vehicles at once, indexed by vehicle id.
///
/// Sorts positions and slides a window, which keeps the per-epoch cost near
/// linear instead of quadratic. Agrees with [`local_vehicle_density`] on
/// every vehicle.
pub fn local_vehicle_densities(vehicles: &[VehicleKinematics], road_length_m: f64) -> Vec<usize> {
    let n = vehicles.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        vehicles[a]
            .position_m
            .total_cmp(&vehicles[b].position_m)
            .then(vehicles[a].id.cmp(&vehicles[b].id))
    });

    let mut counts = vec![0usize; n];
    // For each vehicle walk outward in the sorted circular order in both
    // directions until the ring distance exceeds the radius. Window sizes
    // are small relative to n for realistic densities.
    for (rank, &vi) in order.iter().enumerate() {
        let pos = vehicles[vi].position_m;
        let mut count = 0usize;
        for step in 1..n {
            let other = vehicles[order[(rank + step) % n]];
            if ring_distance(pos, other.position_m, road_length_m) <= DENSITY_RADIUS_M {
                count += 1;
            } else {
                break;
            }
        }
        for step in 1..n {
            let other = vehicles[order[(rank + n - step) % n]];
            if ring_distance(pos, other.position_m, road_length_m) <= DENSITY_RADIUS_M {
                count += 1;
            } else {
                break;
            }
        }
        // The two walks can only meet when the whole ring lies inside the
        // radius window; cap at n - 1 others in that case.
        counts[vehicles[vi].id as usize] = count.min(n - 1);
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rngs() -> (ChaCha8Rng, ChaCha8Rng) {
        (ChaCha8Rng::seed_from_u64(7), ChaCha8Rng::seed_from_u64(8))
    }

    #[test]
    fn vehicle_count_follows_density() {
        let mut cfg = ScenarioConfig::default();
        cfg.density_veh_per_km = 100.0;
        assert_eq!(cfg.vehicle_count(), 200);
        cfg.density_veh_per_km = 500.0;
        assert_eq!(cfg.vehicle_count(), 1000);
        cfg.density_veh_per_km = 1.0;
        assert_eq!(cfg.vehicle_count(), 2);
    }

    #[test]
    fn placement_draws_expected_population() {
        let cfg = ScenarioConfig::default();
        let (mut pr, mut sr) = rngs();
        let vehicles = init_placement(&cfg, &mut pr, &mut sr).unwrap();
        assert_eq!(vehicles.len(), 200);
        for v in &vehicles {
            assert!(v.position_m >= 0.0 && v.position_m < cfg.road_length_m);
            assert!(v.speed_mps > 0.0);
            // 50 km/h with 3 km/h deviation: all draws land well inside
            // 30..70 km/h.
            assert!(v.speed_mps > 30.0 / 3.6 && v.speed_mps < 70.0 / 3.6);
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut cfg = ScenarioConfig::default();
        cfg.road_length_m = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.density_veh_per_km = 0.4; // rounds to < 2 vehicles
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn advance_wraps_around_ring() {
        let mut vehicles = vec![VehicleKinematics {
            id: 0,
            position_m: 1999.0,
            speed_mps: 10.0,
        }];
        advance(&mut vehicles, 0.2, 2000.0);
        assert!((vehicles[0].position_m - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ring_distance_takes_shorter_arc() {
        assert_eq!(ring_distance(0.0, 1900.0, 2000.0), 100.0);
        assert_eq!(ring_distance(42.0, 42.0, 2000.0), 0.0);
        assert_eq!(ring_distance(0.0, 1000.0, 2000.0), 1000.0);
    }

    #[test]
    fn density_radius_is_inclusive() {
        let vehicles = vec![
            VehicleKinematics { id: 0, position_m: 0.0, speed_mps: 1.0 },
            VehicleKinematics { id: 1, position_m: 100.0, speed_mps: 1.0 },
            VehicleKinematics { id: 2, position_m: 250.0, speed_mps: 1.0 },
        ];
        assert_eq!(local_vehicle_density(0, &vehicles, 2000.0), 1);
        assert_eq!(local_vehicle_density(2, &vehicles, 2000.0), 0);
    }

    #[test]
    fn batch_density_matches_reference() {
        let cfg = ScenarioConfig {
            density_veh_per_km: 150.0,
            ..ScenarioConfig::default()
        };
        let (mut pr, mut sr) = rngs();
        let vehicles = init_placement(&cfg, &mut pr, &mut sr).unwrap();
        let batch = local_vehicle_densities(&vehicles, cfg.road_length_m);
        for v in &vehicles {
            assert_eq!(
                batch[v.id as usize],
                local_vehicle_density(v.id, &vehicles, cfg.road_length_m),
                "vehicle {}",
                v.id
            );
        }
    }

    #[test]
    fn mean_density_tracks_configured_rho() {
        // Uniform placement at 200 veh/km should see about 40 neighbours in
        // a 200 m window. Averaged over many placements the estimate has to
        // land within a few percent.
        let cfg = ScenarioConfig {
            density_veh_per_km: 200.0,
            ..ScenarioConfig::default()
        };
        let (mut pr, mut sr) = rngs();
        let mut total = 0usize;
        let mut samples = 0usize;
        for _ in 0..300 {
            let vehicles = init_placement(&cfg, &mut pr, &mut sr).unwrap();
            for c in local_vehicle_densities(&vehicles, cfg.road_length_m) {
                total += c;
                samples += 1;
            }
        }
        let mean = total as f64 / samples as f64;
        let expected = cfg.density_veh_per_km * 2.0 * DENSITY_RADIUS_M / 1000.0;
        assert!(
            (mean - expected).abs() / expected < 0.05,
            "mean {mean:.2} vs expected {expected:.2}"
        );
    }
}
