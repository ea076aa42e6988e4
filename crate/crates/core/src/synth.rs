//! Deterministic synthetic mobility generator.
//!
//! Anchor-based: each user gets seeded home, work, and leisure cells; the
//! regime (which anchor a slot gravitates to) is a pure function of
//! (day-of-week, slot), so with zero jitter and full observation every
//! user's pattern repeats with period 7 exactly. Observation dropouts and
//! cell jitter supply the per-day randomness, and an optional emergency day
//! pulls post-horizon activity back to the home anchor — the level shift
//! the fine-tuning regime exists for.

use serde::{Deserialize, Serialize};

use crate::data::eda::{autocorrelation, daily_series, oov_rates};
use crate::data::{build_histories, dow_of, OovStats, PingRecord};
use crate::seeds;
use crate::{DATASET_DAYS, GRID_SIZE, SLOTS_PER_DAY};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: u32,
    pub n_days: u32,
    /// Per-slot observation probability, 48 entries in [0, 1].
    pub p_observe: Vec<f64>,
    /// Max per-axis cell jitter around the active anchor.
    pub noise_radius: u32,
    /// When set, days >= this pull non-home visits back home.
    pub emergency_day: Option<u32>,
    pub emergency_home_bias: f64,
    pub dow_offset: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 50,
            n_days: DATASET_DAYS,
            p_observe: default_p_observe(),
            noise_radius: 2,
            emergency_day: None,
            emergency_home_bias: 0.8,
            dow_offset: 0,
            seed: 1,
        }
    }
}

/// Day/night observation profile: sparse overnight, dense during the day.
pub fn default_p_observe() -> Vec<f64> {
    (0..SLOTS_PER_DAY)
        .map(|t| if (14..44).contains(&t) { 0.65 } else { 0.3 })
        .collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users == 0 {
            return Err(SynthError::InvalidConfig("n_users must be positive".into()));
        }
        if self.n_days == 0 || self.n_days > DATASET_DAYS {
            return Err(SynthError::InvalidConfig(format!(
                "n_days {} outside [1, {DATASET_DAYS}]",
                self.n_days
            )));
        }
        if self.p_observe.len() != SLOTS_PER_DAY as usize {
            return Err(SynthError::InvalidConfig(format!(
                "p_observe needs {SLOTS_PER_DAY} entries, got {}",
                self.p_observe.len()
            )));
        }
        if self.p_observe.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SynthError::InvalidConfig("p_observe entries must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.emergency_home_bias) {
            return Err(SynthError::InvalidConfig("emergency_home_bias must be in [0, 1]".into()));
        }
        if self.dow_offset >= 7 {
            return Err(SynthError::InvalidConfig("dow_offset must be in [0, 7)".into()));
        }
        if self.noise_radius >= GRID_SIZE {
            return Err(SynthError::InvalidConfig("noise_radius too large".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Anchors {
    home: (u32, u32),
    work: (u32, u32),
    leisure: (u32, u32),
}

fn user_anchors(rng: &mut ChaCha8Rng) -> Anchors {
    let cell = |rng: &mut ChaCha8Rng| {
        (rng.gen_range(0..GRID_SIZE), rng.gen_range(0..GRID_SIZE))
    };
    Anchors { home: cell(rng), work: cell(rng), leisure: cell(rng) }
}

/// Which anchor a (dow, slot) pair gravitates to. Pure function, so the
/// noise-free pattern is exactly 7-periodic.
fn regime(anchors: &Anchors, dow: u32, slot: u32) -> (u32, u32) {
    match dow {
        0..=4 => {
            if (18..38).contains(&slot) {
                anchors.work
            } else {
                anchors.home
            }
        }
        5 => {
            if (20..34).contains(&slot) {
                anchors.leisure
            } else {
                anchors.home
            }
        }
        _ => anchors.home,
    }
}

fn jitter(rng: &mut ChaCha8Rng, anchor: (u32, u32), radius: u32) -> (u32, u32) {
    if radius == 0 {
        return anchor;
    }
    let r = radius as i64;
    let dx = rng.gen_range(-r..=r);
    let dy = rng.gen_range(-r..=r);
    let clamp = |v: i64| v.clamp(0, GRID_SIZE as i64 - 1) as u32;
    (clamp(anchor.0 as i64 + dx), clamp(anchor.1 as i64 + dy))
}

/// Generate the full ping set. Deterministic given the config; users draw
/// from independent derived streams so per-user work parallelizes without
/// affecting output.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<PingRecord>, SynthError> {
    cfg.validate()?;
    let uids: Vec<u32> = (0..cfg.n_users).collect();
    let per_user = crate::parallel::map_independent(uids, |uid| generate_user(cfg, uid));
    Ok(per_user.into_iter().flatten().collect())
}

fn generate_user(cfg: &SynthConfig, uid: u32) -> Vec<PingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(cfg.seed, uid as u64));
    let anchors = user_anchors(&mut rng);
    let mut out = Vec::new();
    for day in 0..cfg.n_days {
        let dow = dow_of(day, cfg.dow_offset);
        for slot in 0..SLOTS_PER_DAY {
            if !rng.gen_bool(cfg.p_observe[slot as usize]) {
                continue;
            }
            let mut anchor = regime(&anchors, dow, slot);
            if let Some(eday) = cfg.emergency_day {
                if day >= eday && anchor != anchors.home && rng.gen_bool(cfg.emergency_home_bias) {
                    anchor = anchors.home;
                }
            }
            let (x, y) = jitter(&mut rng, anchor, cfg.noise_radius);
            out.push(PingRecord { uid, day, slot, x, y });
        }
    }
    out
}

/// Qualitative properties of a generated (or real) ping set.
#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub events_per_slot: Vec<f64>,
    /// Autocorrelation of the daily mean-unique-cells series.
    pub lag1_autocorr: f64,
    pub lag7_autocorr: f64,
    pub mean_unique_cells_before_horizon: f64,
    pub mean_unique_cells_from_horizon: f64,
    pub per_user_oov: Vec<(u32, f64, f64, f64)>,
    pub mean_oov_xy: f64,
}

pub fn synth_properties_report(records: &[PingRecord], dow_offset: u32, horizon: u32) -> SynthReport {
    let histories = build_histories(records, dow_offset);
    let events = crate::data::eda::events_per_slot(&histories, 0..DATASET_DAYS)
        .unwrap_or_else(|_| vec![0.0; SLOTS_PER_DAY as usize]);
    let series = daily_series(&histories);
    let unique: Vec<f64> = series.iter().map(|d| d.mean_unique_cells).collect();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for stat in &series {
        if stat.day < horizon {
            before.push(stat.mean_unique_cells);
        } else {
            after.push(stat.mean_unique_cells);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut per_user_oov = Vec::new();
    let mut xy_rates = Vec::new();
    for (uid, hist) in &histories {
        if let Ok(OovStats { rate_x, rate_y, rate_xy }) = oov_rates(hist, horizon) {
            per_user_oov.push((*uid, rate_x, rate_y, rate_xy));
            xy_rates.push(rate_xy);
        }
    }
    SynthReport {
        events_per_slot: events,
        lag1_autocorr: autocorrelation(&unique, 1),
        lag7_autocorr: autocorrelation(&unique, 7),
        mean_unique_cells_before_horizon: mean(&before),
        mean_unique_cells_from_horizon: mean(&after),
        mean_oov_xy: mean(&xy_rates),
        per_user_oov,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest::{ingest_csv, write_csv};

    #[test]
    fn deterministic_given_config() {
        let cfg = SynthConfig { n_users: 5, seed: 9, ..SynthConfig::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn p_observe_zero_gives_empty_output() {
        let cfg = SynthConfig {
            n_users: 3,
            p_observe: vec![0.0; 48],
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg).unwrap().is_empty());
    }

    #[test]
    fn noise_free_full_observation_is_week_periodic() {
        let cfg = SynthConfig {
            n_users: 3,
            n_days: 21,
            p_observe: vec![1.0; 48],
            noise_radius: 0,
            emergency_day: None,
            ..SynthConfig::default()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        let histories = build_histories(&recs, cfg.dow_offset);
        for hist in histories.values() {
            for day in 0..14u32 {
                assert_eq!(
                    hist.days[&day].slots,
                    hist.days[&(day + 7)].slots,
                    "uid {} day {day} not 7-periodic",
                    hist.uid
                );
            }
        }
    }

    #[test]
    fn emergency_reduces_unique_cells() {
        let cfg = SynthConfig {
            n_users: 20,
            emergency_day: Some(60),
            emergency_home_bias: 0.9,
            ..SynthConfig::default()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        let report = synth_properties_report(&recs, cfg.dow_offset, 60);
        assert!(
            report.mean_unique_cells_from_horizon < report.mean_unique_cells_before_horizon,
            "expected drop: before {} after {}",
            report.mean_unique_cells_before_horizon,
            report.mean_unique_cells_from_horizon
        );
    }

    #[test]
    fn no_emergency_no_level_shift() {
        let cfg = SynthConfig { n_users: 20, emergency_day: None, ..SynthConfig::default() };
        let recs = generate_synthetic(&cfg).unwrap();
        let report = synth_properties_report(&recs, cfg.dow_offset, 60);
        let rel = (report.mean_unique_cells_from_horizon
            - report.mean_unique_cells_before_horizon)
            .abs()
            / report.mean_unique_cells_before_horizon;
        assert!(rel < 0.1, "unexpected level shift {rel}");
    }

    #[test]
    fn weekly_autocorrelation_dominates_lag1() {
        let cfg = SynthConfig { n_users: 12, ..SynthConfig::default() };
        let recs = generate_synthetic(&cfg).unwrap();
        let report = synth_properties_report(&recs, cfg.dow_offset, 60);
        assert!(report.lag7_autocorr > report.lag1_autocorr, "lag7 {} <= lag1 {}", report.lag7_autocorr, report.lag1_autocorr);
    }

    #[test]
    fn periodic_noise_free_autocorr_is_one() {
        let cfg = SynthConfig {
            n_users: 4,
            p_observe: vec![1.0; 48],
            noise_radius: 0,
            ..SynthConfig::default()
        };
        let recs = generate_synthetic(&cfg).unwrap();
        let report = synth_properties_report(&recs, cfg.dow_offset, 60);
        assert!((report.lag7_autocorr - 1.0).abs() < 1e-9);
    }

    #[test]
    fn default_config_produces_nonzero_oov() {
        let cfg = SynthConfig { n_users: 30, ..SynthConfig::default() };
        let recs = generate_synthetic(&cfg).unwrap();
        let report = synth_properties_report(&recs, cfg.dow_offset, 60);
        assert!(report.mean_oov_xy > 0.0);
    }

    #[test]
    fn output_roundtrips_through_ingestion() {
        let cfg = SynthConfig { n_users: 4, n_days: 10, ..SynthConfig::default() };
        let recs = generate_synthetic(&cfg).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &recs).unwrap();
        assert_eq!(ingest_csv(f.path()).unwrap(), recs);
    }

    #[test]
    fn daytime_events_exceed_nighttime() {
        let cfg = SynthConfig { n_users: 10, ..SynthConfig::default() };
        let recs = generate_synthetic(&cfg).unwrap();
        let report = synth_properties_report(&recs, cfg.dow_offset, 60);
        let day: f64 = report.events_per_slot[18..36].iter().sum();
        let night: f64 = report.events_per_slot[0..12].iter().sum();
        assert!(day > night * 1.5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.p_observe = vec![0.5; 10];
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.n_users = 0;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.dow_offset = 7;
        assert!(generate_synthetic(&cfg).is_err());
    }
}
