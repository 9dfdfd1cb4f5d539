//! Closed-form and Monte Carlo oracles for the persistent-collision
//! breakout model, independent of the slot-level simulator.
//!
//! Two vehicles stuck on the same resource each hold it for a geometric
//! number of counter runs (a run survives re-selection with probability
//! `p_keep`). The collision breaks when the shorter sequence ends, so the
//! expected number of runs until breakout is `1 / (2p - p^2)` with
//! `p = 1 - p_keep`, and the expected time scales by the mean counter draw
//! and the reservation period.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Expected number of counter runs until the shorter of two geometric run
/// sequences ends, `1 / (2p - p^2)` with `p = 1 - p_keep`.
pub fn expected_shorter_run(p_keep: f64) -> Result<f64, ConfigError> {
    if !(0.0..1.0).contains(&p_keep) {
        return Err(ConfigError::invalid(
            "p_keep",
            "breakout model needs 0 <= p_keep < 1",
        ));
    }
    let p = 1.0 - p_keep;
    Ok(1.0 / (2.0 * p - p * p))
}

/// One geometric draw on support {1, 2, ...}: the number of runs up to and
/// including the first failed keep, each run ending with success
/// probability `p`.
pub fn sample_geometric_runs(p: f64, rng: &mut impl Rng) -> u64 {
    debug_assert!(p > 0.0 && p <= 1.0);
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen();
    ((1.0 - u).ln() / (1.0 - p).ln()).ceil().max(1.0) as u64
}

/// Monte Carlo mean of `min` of two independent geometric run counts.
pub fn mean_min_geometric_runs(
    p_keep: f64,
    trials: u64,
    rng: &mut impl Rng,
) -> Result<f64, ConfigError> {
    expected_shorter_run(p_keep)?;
    let p = 1.0 - p_keep;
    let mut total = 0u64;
    for _ in 0..trials {
        let a = sample_geometric_runs(p, rng);
        let b = sample_geometric_runs(p, rng);
        total += a.min(b);
    }
    Ok(total as f64 / trials as f64)
}

/// Exact expectation of the smaller of two independent uniform integers on
/// `[lo..hi]`, by enumeration of all pairs.
pub fn min_counter_mean(lo: u32, hi: u32) -> f64 {
    assert!(lo <= hi, "degenerate counter range");
    let n = (hi - lo + 1) as u64;
    let mut sum = 0u64;
    for a in lo..=hi {
        for b in lo..=hi {
            sum += a.min(b) as u64;
        }
    }
    sum as f64 / (n * n) as f64
}

/// Parameters of the two-vehicle breakout model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakoutModel {
    pub p_keep: f64,
    pub counter_lo: u32,
    pub counter_hi: u32,
    pub period_ms: u32,
}

impl Default for BreakoutModel {
    fn default() -> Self {
        BreakoutModel {
            p_keep: 0.8,
            counter_lo: 5,
            counter_hi: 15,
            period_ms: 100,
        }
    }
}

impl BreakoutModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        expected_shorter_run(self.p_keep).map(|_| ())?;
        if self.counter_lo > self.counter_hi || self.counter_lo == 0 {
            return Err(ConfigError::invalid(
                "counter_range",
                "need 1 <= lo <= hi",
            ));
        }
        if self.period_ms == 0 {
            return Err(ConfigError::invalid("period_ms", "must be positive"));
        }
        Ok(())
    }
}

/// Monte Carlo summary of the time until breakout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakoutStats {
    pub mean_s: f64,
    pub q99_s: f64,
    pub q999_s: f64,
    /// Sample skewness of the breakout-time distribution.
    pub skewness: f64,
}

/// Simulates `n_trials` two-vehicle breakouts: each trial draws two
/// geometric run counts, sums uniform counter draws over the shorter
/// sequence and scales by the period.
pub fn breakout_time_stats(
    model: &BreakoutModel,
    n_trials: u64,
    rng: &mut impl Rng,
) -> Result<BreakoutStats, ConfigError> {
    model.validate()?;
    if n_trials == 0 {
        return Err(ConfigError::invalid("n_trials", "must be positive"));
    }
    let p = 1.0 - model.p_keep;
    let mut times_s: Vec<f64> = Vec::with_capacity(n_trials as usize);
    for _ in 0..n_trials {
        let runs = sample_geometric_runs(p, rng).min(sample_geometric_runs(p, rng));
        let mut transmissions = 0u64;
        for _ in 0..runs {
            transmissions += rng.gen_range(model.counter_lo..=model.counter_hi) as u64;
        }
        times_s.push(transmissions as f64 * model.period_ms as f64 / 1000.0);
    }
    times_s.sort_unstable_by(f64::total_cmp);

    let n = n_trials as f64;
    let mean = times_s.iter().sum::<f64>() / n;
    let m2 = times_s.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let m3 = times_s.iter().map(|t| (t - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let quantile = |q: f64| -> f64 {
        let idx = ((q * n).ceil() as usize).clamp(1, times_s.len()) - 1;
        times_s[idx]
    };
    Ok(BreakoutStats {
        mean_s: mean,
        q99_s: quantile(0.99),
        q999_s: quantile(0.999),
        skewness,
    })
}

/// One row of the keep-probability sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p_keep: f64,
    pub mean_breakout_s: f64,
    pub q99_s: f64,
    pub q999_s: f64,
}

/// Runs the breakout model across keep probabilities.
pub fn breakout_sweep(
    p_keeps: &[f64],
    template: &BreakoutModel,
    n_trials: u64,
    rng: &mut impl Rng,
) -> Result<Vec<SweepRow>, ConfigError> {
    p_keeps
        .iter()
        .map(|&p_keep| {
            let model = BreakoutModel { p_keep, ..*template };
            let stats = breakout_time_stats(&model, n_trials, rng)?;
            Ok(SweepRow {
                p_keep,
                mean_breakout_s: stats.mean_s,
                q99_s: stats.q99_s,
                q999_s: stats.q999_s,
            })
        })
        .collect()
}

/// Renders sweep rows as a CSV table.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p_keep,mean_breakout_s,q99_s,q999_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.p_keep, r.mean_breakout_s, r.q99_s, r.q999_s
        ));
    }
    out
}
