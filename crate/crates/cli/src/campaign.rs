//! Sweep campaigns: cartesian products of schemes, densities and seeds,
//! scheduled across a worker pool. Every run writes its own report file
//! atomically, so output never depends on the parallelism degree and an
//! interrupted campaign leaves no half-written files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sidelink_core::oneshot::Scheme;
use sidelink_core::{run, SimConfig, SimulationReport};

use crate::report::comparison_csv;
use crate::CliError;

/// Inclusive seed expressions: `7`, `1,2,5` or `1..20`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = |detail: &str| {
        CliError::Usage(format!(
            "invalid seed expression '{text}': {detail} (expected N, N..M or a comma list)"
        ))
    };
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad("bad range start"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad("bad range end"))?;
        if lo > hi {
            return Err(bad("range start exceeds end"));
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad("bad number")))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(bad("empty"));
    }
    Ok(seeds)
}

/// Comma-separated densities in vehicles per kilometer.
pub fn parse_densities(text: &str) -> Result<Vec<f64>, CliError> {
    let densities: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid density list '{text}'")))
        })
        .collect::<Result<_, _>>()?;
    for &d in &densities {
        if !(d > 0.0) {
            return Err(CliError::Usage(format!("density must be positive, got {d}")));
        }
    }
    Ok(densities)
}

/// Comma-separated scheme names.
pub fn parse_schemes(text: &str) -> Result<Vec<Scheme>, CliError> {
    text.split(',')
        .map(|s| s.trim().parse::<Scheme>().map_err(CliError::Usage))
        .collect()
}

/// Writes through a dot-prefixed sibling temp file and renames into place.
pub fn atomic_write(path: &Path, content: &str) -> Result<(), CliError> {
    let io_err = |stage: &str, e: std::io::Error| {
        CliError::Runtime(format!("{stage} {}: {e}", path.display()))
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, content).map_err(|e| io_err("cannot write", e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err("cannot finalize", e))
}

fn density_tag(density: f64) -> String {
    if (density - density.round()).abs() < 1e-9 {
        format!("{:.0}", density)
    } else {
        format!("{density}")
    }
}

/// File stem identifying one run within a campaign.
pub fn run_tag(scheme: Scheme, density: f64, seed: u64) -> String {
    format!("run_{scheme}_rho{}_seed{seed}", density_tag(density))
}

/// Runs the full cartesian product and writes per-run JSON reports plus
/// merged `summary.csv` and `comparison.csv` tables into `out_dir`.
/// `workers = 0` leaves the pool size to the runtime.
pub fn run_sweep(
    base: &SimConfig,
    schemes: &[Scheme],
    densities: &[f64],
    seeds: &[u64],
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<SimulationReport>, CliError> {
    if schemes.is_empty() || densities.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage(
            "sweep needs at least one scheme, density and seed".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut jobs: Vec<SimConfig> = Vec::new();
    for &scheme in schemes {
        for &density in densities {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.scheme = scheme;
                cfg.scenario.density_veh_per_km = density;
                cfg.seed = seed;
                cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                jobs.push(cfg);
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot build worker pool: {e}")))?;
    let mut reports = pool.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let report = run(cfg).map_err(|e| {
                    CliError::Runtime(format!(
                        "run {} failed: {e}",
                        run_tag(cfg.scheme, cfg.scenario.density_veh_per_km, cfg.seed)
                    ))
                })?;
                let tag = run_tag(cfg.scheme, cfg.scenario.density_veh_per_km, cfg.seed);
                atomic_write(&out_dir.join(format!("{tag}.json")), &report.to_json())?;
                Ok(report)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    // A canonical order keeps the merged tables independent of scheduling.
    reports.sort_by(|a, b| {
        (a.scheme.to_string(), a.density_veh_per_km.round() as u64, a.seed).cmp(&(
            b.scheme.to_string(),
            b.density_veh_per_km.round() as u64,
            b.seed,
        ))
    });

    let mut summary = String::from(SimulationReport::summary_csv_header());
    for r in &reports {
        summary.push_str(&r.summary_csv_row());
    }
    atomic_write(&out_dir.join("summary.csv"), &summary)?;
    atomic_write(&out_dir.join("comparison.csv"), &comparison_csv(&reports))?;
    Ok(reports)
}

/// Output files for one standalone run.
pub fn write_single_run(report: &SimulationReport, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut summary = String::from(SimulationReport::summary_csv_header());
    summary.push_str(&report.summary_csv_row());
    let files = [
        ("summary.csv", summary),
        ("pir.csv", report.pir_csv()),
        ("prr.csv", report.prr_csv()),
        ("collisions.csv", report.collisions_csv()),
        ("report.json", report.to_json()),
    ];
    let mut written = Vec::new();
    for (name, content) in files {
        let path = out_dir.join(name);
        atomic_write(&path, &content)?;
        written.push(path);
    }
    Ok(written)
}
