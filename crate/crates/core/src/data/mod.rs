//! Mobility data model: pings, per-user histories, dataset splits, and the
//! exploratory statistics derived from them.
//!
//! Coordinates are 0-based in `[0, 500)` everywhere inside the crate; the
//! CSV boundary (see [`ingest`]) shifts the 1-based on-disk values.

pub mod eda;
pub mod ingest;
pub mod split;

use std::collections::BTreeMap;

use crate::{DATASET_DAYS, GRID_SIZE, SLOTS_PER_DAY};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed row: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {field} = {value} out of range")]
    Range { line: u64, field: &'static str, value: i64 },
    #[error("unexpected header `{0}` (expected `uid,d,t,x,y`)")]
    Header(String),
    #[error("duplicate observation for uid {uid} at day {day} slot {slot}")]
    Duplicate { uid: u32, day: u32, slot: u32 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty day range")]
    EmptyDayRange,
    #[error("uid {0} has no pings before the horizon")]
    NoPingsBeforeHorizon(u32),
    #[error("uid {0} has no pings after the horizon")]
    NoPingsAfterHorizon(u32),
}

/// One observation: user `uid` seen at cell `(x, y)` in half-hour slot
/// `slot` of day `day`. At most one record exists per `(uid, day, slot)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PingRecord {
    pub uid: u32,
    pub day: u32,
    pub slot: u32,
    pub x: u32,
    pub y: u32,
}

impl PingRecord {
    pub fn new(uid: u32, day: u32, slot: u32, x: u32, y: u32) -> Result<Self, DataError> {
        let rec = PingRecord { uid, day, slot, x, y };
        rec.validate(0)?;
        Ok(rec)
    }

    fn validate(&self, line: u64) -> Result<(), DataError> {
        if self.day >= DATASET_DAYS {
            return Err(DataError::Range { line, field: "d", value: self.day as i64 });
        }
        if self.slot >= SLOTS_PER_DAY {
            return Err(DataError::Range { line, field: "t", value: self.slot as i64 });
        }
        if self.x >= GRID_SIZE {
            return Err(DataError::Range { line, field: "x", value: self.x as i64 });
        }
        if self.y >= GRID_SIZE {
            return Err(DataError::Range { line, field: "y", value: self.y as i64 });
        }
        Ok(())
    }

    pub fn cell(&self) -> GridCell {
        GridCell { x: self.x, y: self.y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridCell {
    pub x: u32,
    pub y: u32,
}

impl GridCell {
    pub fn new(x: u32, y: u32) -> Result<Self, DataError> {
        if x >= GRID_SIZE {
            return Err(DataError::Range { line: 0, field: "x", value: x as i64 });
        }
        if y >= GRID_SIZE {
            return Err(DataError::Range { line: 0, field: "y", value: y as i64 });
        }
        Ok(GridCell { x, y })
    }

    pub fn euclid(&self, other: &GridCell) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

/// One day of a user's trajectory: 48 slots, each observed or absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayTrajectory {
    pub dow: u32,
    pub slots: [Option<GridCell>; SLOTS_PER_DAY as usize],
}

impl DayTrajectory {
    pub fn empty(dow: u32) -> Self {
        assert!(dow < 7, "dow {dow} out of range");
        DayTrajectory { dow, slots: [None; SLOTS_PER_DAY as usize] }
    }

    pub fn observed_slots(&self) -> impl Iterator<Item = (u32, GridCell)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(t, c)| c.map(|cell| (t as u32, cell)))
    }

    pub fn n_observed(&self) -> usize {
        self.slots.iter().filter(|c| c.is_some()).count()
    }
}

/// Day-of-week of `day` under a dataset-level offset (day 0 has dow
/// `dow_offset`).
pub fn dow_of(day: u32, dow_offset: u32) -> u32 {
    (day + dow_offset) % 7
}

/// A user's assembled trajectory: one [`DayTrajectory`] per day in the
/// observed span (gap days materialized as all-absent).
#[derive(Debug, Clone)]
pub struct UserHistory {
    pub uid: u32,
    pub dow_offset: u32,
    pub days: BTreeMap<u32, DayTrajectory>,
}

impl UserHistory {
    /// First and last day present, if any.
    pub fn span(&self) -> Option<(u32, u32)> {
        let first = *self.days.keys().next()?;
        let last = *self.days.keys().next_back()?;
        Some((first, last))
    }

    /// Flatten back to ping records, sorted by (day, slot).
    pub fn pings(&self) -> Vec<PingRecord> {
        let mut out = Vec::new();
        for (&day, traj) in &self.days {
            for (slot, cell) in traj.observed_slots() {
                out.push(PingRecord { uid: self.uid, day, slot, x: cell.x, y: cell.y });
            }
        }
        out
    }

    /// Pings strictly before `horizon_day`.
    pub fn pings_before(&self, horizon_day: u32) -> Vec<PingRecord> {
        self.pings().into_iter().filter(|p| p.day < horizon_day).collect()
    }

    /// Pings at or after `horizon_day`.
    pub fn pings_from(&self, horizon_day: u32) -> Vec<PingRecord> {
        self.pings().into_iter().filter(|p| p.day >= horizon_day).collect()
    }
}

/// Group records into per-user histories. Days between a user's first and
/// last observed day that carry no pings become all-absent trajectories, so
/// every in-span day exists and window construction sees a fixed structure.
pub fn build_histories(records: &[PingRecord], dow_offset: u32) -> BTreeMap<u32, UserHistory> {
    assert!(dow_offset < 7, "dow_offset {dow_offset} out of range");
    let mut map: BTreeMap<u32, UserHistory> = BTreeMap::new();
    for rec in records {
        let hist = map
            .entry(rec.uid)
            .or_insert_with(|| UserHistory { uid: rec.uid, dow_offset, days: BTreeMap::new() });
        let traj = hist
            .days
            .entry(rec.day)
            .or_insert_with(|| DayTrajectory::empty(dow_of(rec.day, dow_offset)));
        traj.slots[rec.slot as usize] = Some(rec.cell());
    }
    for hist in map.values_mut() {
        if let Some((first, last)) = hist.span() {
            for day in first..=last {
                hist.days
                    .entry(day)
                    .or_insert_with(|| DayTrajectory::empty(dow_of(day, dow_offset)));
            }
        }
    }
    map
}

/// Val/test membership plus the horizon separating their visible history
/// from the held-out prediction period.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub horizon_day: u32,
}

impl DatasetSplit {
    pub fn is_heldout(&self, uid: u32) -> bool {
        self.val.binary_search(&uid).is_ok() || self.test.binary_search(&uid).is_ok()
    }

    /// Exclusive upper bound on days visible to training for this user.
    pub fn training_day_limit(&self, uid: u32) -> Option<u32> {
        if self.is_heldout(uid) {
            Some(self.horizon_day)
        } else {
            None
        }
    }
}

/// Out-of-training rates: the share of post-horizon pings whose x value,
/// y value, or (x, y) pair never occurred pre-horizon for the same user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OovStats {
    pub rate_x: f64,
    pub rate_y: f64,
    pub rate_xy: f64,
}
