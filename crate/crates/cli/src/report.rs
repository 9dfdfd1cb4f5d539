//! Merging per-run reports into comparison tables keyed by scheme and
//! density: per-group means plus tail quantiles over the pooled
//! inter-reception histogram.

use std::collections::BTreeMap;
use std::path::Path;

use sidelink_core::SimulationReport;

use crate::CliError;

/// Reads every `*.json` run report under `dir`.
pub fn load_reports(dir: &Path) -> Result<Vec<SimulationReport>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot read run directory {}: {e}", dir.display())))?;
    let mut reports = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Runtime(format!("while listing {}: {e}", dir.display())))?
            .path();
        if path.extension().is_none_or(|ext| ext != "json") {
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let report: SimulationReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("not a run report {}: {e}", path.display())))?;
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(CliError::Usage(format!(
            "no .json run reports in {}",
            dir.display()
        )));
    }
    Ok(reports)
}

/// Smallest inter-reception gap whose exceedance stays within `tail`, over
/// the histograms of all grouped runs merged together.
fn pooled_pir_quantile(reports: &[&SimulationReport], tail: f64) -> Option<u32> {
    let mut hist: BTreeMap<u32, u64> = BTreeMap::new();
    let mut samples = 0u64;
    for r in reports {
        for e in &r.metrics.pir_hist {
            *hist.entry(e.gap_ms).or_insert(0) += e.count;
            samples += e.count;
        }
    }
    if samples == 0 {
        return None;
    }
    let allowed = (tail * samples as f64).floor() as u64;
    let mut above = 0u64;
    for (&gap, &count) in hist.iter().rev() {
        above += count;
        if above > allowed {
            return Some(gap);
        }
    }
    hist.keys().next().copied()
}

/// Reception ratio over all grouped runs, from summed counts rather than a
/// mean of ratios.
fn pooled_prr(reports: &[&SimulationReport]) -> f64 {
    let mut expected = 0u64;
    let mut received = 0u64;
    for r in reports {
        for b in &r.metrics.prr_bins {
            expected += b.expected;
            received += b.received;
        }
    }
    if expected == 0 {
        0.0
    } else {
        received as f64 / expected as f64
    }
}

/// One comparison row per (scheme, density) group, seeds folded together.
pub fn comparison_csv(reports: &[SimulationReport]) -> String {
    let mut groups: BTreeMap<(String, u64), Vec<&SimulationReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.scheme.to_string(), r.density_veh_per_km.round() as u64))
            .or_default()
            .push(r);
    }

    let mut out = String::from(
        "scheme,density_veh_per_km,runs,mean_itt_s,mean_total_collisions,\
         mean_collision_events,mean_collisions_per_event,mean_oneshot_tx,mean_breakouts,\
         pooled_prr,pir_p999_ms,pir_p9999_ms\n",
    );
    for ((scheme, density), group) in &groups {
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&SimulationReport) -> f64| {
            group.iter().map(|r| f(r)).sum::<f64>() / n
        };
        let q = |tail: f64| {
            pooled_pir_quantile(group, tail)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        out.push_str(&format!(
            "{scheme},{density},{},{:.6},{:.1},{:.1},{:.6},{:.1},{:.1},{:.6},{},{}\n",
            group.len(),
            mean(&|r| r.metrics.mean_itt_s),
            mean(&|r| r.metrics.total_collisions as f64),
            mean(&|r| r.metrics.collision_events as f64),
            mean(&|r| r.metrics.mean_collisions_per_event),
            mean(&|r| r.metrics.oneshot_tx as f64),
            mean(&|r| r.metrics.breakout_count as f64),
            pooled_prr(group),
            q(1e-3),
            q(1e-4),
        ));
    }
    out
}
