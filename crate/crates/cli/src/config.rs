//! Layered run configuration: compiled defaults, then an optional TOML
//! file, then command-line flags, each layer overriding the one below it.
//! Unknown keys and type mismatches in the file are rejected outright so a
//! typo cannot silently fall back to a default.

use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use sidelink_core::oneshot::Scheme;
use sidelink_core::SimConfig;

use crate::CliError;

/// Optional mirror of the full simulation configuration. Every field may
/// be omitted; present fields replace the defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    duration_s: Option<f64>,
    warmup_s: Option<f64>,
    scheme: Option<String>,
    p_keep: Option<f64>,
    congestion_enabled: Option<bool>,
    rssi_detection_enabled: Option<bool>,
    eval_radius_m: Option<f64>,
    seed: Option<u64>,
    scenario: Option<FileScenario>,
    phy: Option<FilePhy>,
    sps: Option<FileSps>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    road_length_m: Option<f64>,
    density_veh_per_km: Option<f64>,
    speed_mean_kmh: Option<f64>,
    speed_stddev_kmh: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePhy {
    bandwidth_mhz: Option<f64>,
    n_subchannels: Option<u32>,
    subchannels_per_tb: Option<u32>,
    tx_power_dbm: Option<f64>,
    antenna_gain_db: Option<f64>,
    noise_figure_db: Option<f64>,
    antenna_height_m: Option<f64>,
    mcs_index: Option<u32>,
    sinr_threshold_db: Option<f64>,
    shadowing_stddev_los_db: Option<f64>,
    shadowing_stddev_nlos_db: Option<f64>,
    carrier_freq_ghz: Option<f64>,
    rssi_busy_threshold_dbm: Option<f64>,
    pathloss: Option<FilePathloss>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSps {
    sensing_window_ms: Option<u64>,
    selection_window_ms: Option<u64>,
    exclusion_threshold_dbm: Option<f64>,
    exclusion_relax_db: Option<f64>,
    best_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePathloss {
    min_distance_m: Option<f64>,
    near_slope: Option<f64>,
    near_intercept_db: Option<f64>,
    near_freq_coef: Option<f64>,
    far_slope: Option<f64>,
    far_intercept_db: Option<f64>,
    far_height_coef: Option<f64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, [$($field:ident),+ $(,)?]) => {
        $(if let Some(v) = $src.$field {
            $dst.$field = v;
        })+
    };
}

impl FileConfig {
    /// Parses the file and folds it onto the compiled defaults.
    pub fn load(path: &Path) -> Result<SimConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let file: FileConfig = toml::from_str(&text).map_err(|e| {
            CliError::Usage(format!("invalid config {}: {e}", path.display()))
        })?;
        let mut cfg = SimConfig::default();
        file.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(self, cfg: &mut SimConfig) -> Result<(), CliError> {
        overlay!(cfg, self, [
            duration_s,
            warmup_s,
            p_keep,
            congestion_enabled,
            rssi_detection_enabled,
            eval_radius_m,
            seed,
        ]);
        if let Some(s) = self.scheme {
            cfg.scheme = Scheme::from_str(&s).map_err(CliError::Usage)?;
        }
        if let Some(sc) = self.scenario {
            overlay!(cfg.scenario, sc, [
                road_length_m,
                density_veh_per_km,
                speed_mean_kmh,
                speed_stddev_kmh,
            ]);
        }
        if let Some(phy) = self.phy {
            overlay!(cfg.phy, phy, [
                bandwidth_mhz,
                n_subchannels,
                subchannels_per_tb,
                tx_power_dbm,
                antenna_gain_db,
                noise_figure_db,
                antenna_height_m,
                mcs_index,
                sinr_threshold_db,
                shadowing_stddev_los_db,
                shadowing_stddev_nlos_db,
                carrier_freq_ghz,
                rssi_busy_threshold_dbm,
            ]);
            if let Some(pl) = phy.pathloss {
                overlay!(cfg.phy.pathloss, pl, [
                    min_distance_m,
                    near_slope,
                    near_intercept_db,
                    near_freq_coef,
                    far_slope,
                    far_intercept_db,
                    far_height_coef,
                ]);
            }
        }
        if let Some(sps) = self.sps {
            overlay!(cfg.sps, sps, [
                sensing_window_ms,
                selection_window_ms,
                exclusion_threshold_dbm,
                exclusion_relax_db,
                best_fraction,
            ]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_pure_defaults() {
        let file: FileConfig = toml::from_str("").unwrap();
        let mut cfg = SimConfig::default();
        file.apply(&mut cfg).unwrap();
        assert_eq!(cfg, SimConfig::default());
        assert_eq!(cfg.p_keep, 0.8);
        assert_eq!(cfg.phy.n_subchannels, 10);
    }

    #[test]
    fn nested_overrides_land() {
        let file: FileConfig = toml::from_str(
            "p_keep = 0.5\nscheme = \"proposed\"\n[scenario]\ndensity_veh_per_km = 300\n\
             [phy]\ntx_power_dbm = 23\n[sps]\nbest_fraction = 0.25\n",
        )
        .unwrap();
        let mut cfg = SimConfig::default();
        file.apply(&mut cfg).unwrap();
        assert_eq!(cfg.p_keep, 0.5);
        assert_eq!(cfg.scheme, Scheme::Proposed);
        assert_eq!(cfg.scenario.density_veh_per_km, 300.0);
        assert_eq!(cfg.phy.tx_power_dbm, 23.0);
        assert_eq!(cfg.sps.best_fraction, 0.25);
        // Untouched siblings keep their defaults.
        assert_eq!(cfg.scenario.road_length_m, 2000.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("not_a_key = 1").is_err());
        assert!(toml::from_str::<FileConfig>("[scenario]\ndensity = 100").is_err());
    }

    #[test]
    fn type_mismatch_is_rejected() {
        assert!(toml::from_str::<FileConfig>("p_keep = \"high\"").is_err());
    }
}
