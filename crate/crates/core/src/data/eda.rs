//! Exploratory statistics: per-slot event seasonality, daily movement
//! series, out-of-training coordinate rates, and autocorrelation.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use super::{DataError, OovStats, UserHistory};
use crate::SLOTS_PER_DAY;

/// Mean ping count per slot: for each user, pings at slot `t` within
/// `day_range` divided by the number of days in range, then averaged over
/// users.
pub fn events_per_slot(
    histories: &BTreeMap<u32, UserHistory>,
    day_range: Range<u32>,
) -> Result<Vec<f64>, DataError> {
    if day_range.is_empty() {
        return Err(DataError::EmptyDayRange);
    }
    let n_days = (day_range.end - day_range.start) as f64;
    let n_users = histories.len();
    let mut acc = vec![0.0f64; SLOTS_PER_DAY as usize];
    for hist in histories.values() {
        for (&day, traj) in &hist.days {
            if !day_range.contains(&day) {
                continue;
            }
            for (slot, _) in traj.observed_slots() {
                acc[slot as usize] += 1.0;
            }
        }
    }
    if n_users > 0 {
        for v in acc.iter_mut() {
            *v /= n_days * n_users as f64;
        }
    }
    Ok(acc)
}

/// One row of the daily movement series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyStat {
    pub day: u32,
    pub total_pings: u64,
    /// Mean distinct-cells-per-user among users observed that day.
    pub mean_unique_cells: f64,
}

/// Total pings and mean unique cells for every day present in any history.
pub fn daily_series(histories: &BTreeMap<u32, UserHistory>) -> Vec<DailyStat> {
    let mut per_day: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new(); // pings, unique-sum, users
    for hist in histories.values() {
        for (&day, traj) in &hist.days {
            let n = traj.n_observed() as u64;
            if n == 0 {
                continue;
            }
            let unique: BTreeSet<_> = traj.observed_slots().map(|(_, c)| c).collect();
            let e = per_day.entry(day).or_insert((0, 0, 0));
            e.0 += n;
            e.1 += unique.len() as u64;
            e.2 += 1;
        }
    }
    per_day
        .into_iter()
        .map(|(day, (pings, uniq, users))| DailyStat {
            day,
            total_pings: pings,
            mean_unique_cells: uniq as f64 / users as f64,
        })
        .collect()
}

/// Out-of-training rates for one user at `horizon_day`. Requires at least
/// one ping on each side of the horizon.
pub fn oov_rates(history: &UserHistory, horizon_day: u32) -> Result<OovStats, DataError> {
    let pre = history.pings_before(horizon_day);
    let post = history.pings_from(horizon_day);
    if pre.is_empty() {
        return Err(DataError::NoPingsBeforeHorizon(history.uid));
    }
    if post.is_empty() {
        return Err(DataError::NoPingsAfterHorizon(history.uid));
    }
    let seen_x: BTreeSet<u32> = pre.iter().map(|p| p.x).collect();
    let seen_y: BTreeSet<u32> = pre.iter().map(|p| p.y).collect();
    let seen_xy: BTreeSet<(u32, u32)> = pre.iter().map(|p| (p.x, p.y)).collect();
    let n = post.len() as f64;
    let miss_x = post.iter().filter(|p| !seen_x.contains(&p.x)).count() as f64;
    let miss_y = post.iter().filter(|p| !seen_y.contains(&p.y)).count() as f64;
    let miss_xy = post.iter().filter(|p| !seen_xy.contains(&(p.x, p.y))).count() as f64;
    Ok(OovStats { rate_x: miss_x / n, rate_y: miss_y / n, rate_xy: miss_xy / n })
}

/// Pearson autocorrelation of `series` at `lag`. Constant-but-equal aligned
/// slices count as perfectly correlated.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    if lag >= series.len() {
        return 0.0;
    }
    let a = &series[..series.len() - lag];
    let b = &series[lag..];
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    cov / (va.sqrt() * vb.sqrt())
}
