//! Signature-driven constrained autoregressive decoding.
//!
//! For each held-out day the generator linearizes the 7 most recent days as
//! context, forces the signature's day-of-week token, then walks the 48
//! slots: `Skip` slots force the empty token, `Predict` slots sample an
//! x token and then a y token, each restricted to the user's historical
//! candidate set for that (dow, slot +/- window).
//!
//! Candidate sets can be empty for sparse users, so lookups degrade through
//! a fixed fallback chain — (1) the (dow, slot-window) set, (2) the union
//! over all slots of that dow, (3) the union over the user's entire
//! pre-horizon history, (4) the unconstrained x (resp. y) token range —
//! staying user-specific as long as possible. Every sampled token carries an
//! audit record naming the tier that supplied its candidate set.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{dow_of, DayTrajectory, GridCell, PingRecord, UserHistory};
use crate::linearize::{encode_day, encode_uid, signature_from_day, TargetSignature};
use crate::model::infer::Session;
use crate::model::{ModelError, ModelParams};
use crate::seeds;
use crate::vocab::{dow_token, TokenId, DATA_MARK, EMPTY_SLOT, SEP, X_BASE, Y_BASE};
use crate::{GRID_SIZE, SLOTS_PER_DAY, WINDOW_DAYS};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("context must end with <|sep|>")]
    ContextNotSepTerminated,
    #[error("every candidate token is masked to -inf")]
    ImpossibleConstraint,
    #[error("uid {uid} has only {have} days before the horizon (need {need})")]
    InsufficientContext { uid: u32, have: usize, need: usize },
    #[error("no history for uid {0}")]
    MissingUser(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize)]
pub struct GenConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub candidate_window: u32,
    pub seed: u64,
    /// Feed generated days into subsequent context windows. When off, the
    /// rolled-over days are replaced by all-absent placeholders.
    pub rolling: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            temperature: 1.0,
            top_k: 5,
            top_p: 1.0,
            candidate_window: 2,
            seed: 0,
            rolling: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.temperature > 0.0) {
            return Err(GenError::InvalidConfig("temperature must be > 0".into()));
        }
        if self.top_k == 0 {
            return Err(GenError::InvalidConfig("top_k must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenError::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Which fallback supplied a candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum FallbackTier {
    /// The (dow, slot +/- window) set.
    DowSlotWindow,
    /// Union over all slots of the same dow.
    DowUnion,
    /// Union over the user's entire pre-horizon history.
    HistoryUnion,
    /// The full x (resp. y) token range.
    Unconstrained,
}

/// Per-user candidate token sets, built from pre-horizon data only.
pub struct CandidateIndex {
    /// `[dow * 48 + slot] -> (x tokens, y tokens)`, sorted and deduplicated.
    by_dow_slot: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    by_dow: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    all: (Vec<TokenId>, Vec<TokenId>),
}

/// Collect candidate sets for one user: entry (dow, slot) holds the x and y
/// tokens of pre-horizon pings on that dow within `window` slots either side
/// (clamped to the day).
pub fn build_candidate_index(
    history: &UserHistory,
    horizon_day: u32,
    window: u32,
) -> CandidateIndex {
    let slots = SLOTS_PER_DAY as usize;
    let mut exact: Vec<(Vec<TokenId>, Vec<TokenId>)> = vec![(Vec::new(), Vec::new()); 7 * slots];
    let mut by_dow: Vec<(Vec<TokenId>, Vec<TokenId>)> = vec![(Vec::new(), Vec::new()); 7];
    let mut all: (Vec<TokenId>, Vec<TokenId>) = (Vec::new(), Vec::new());

    for (_, traj) in history.days.range(..horizon_day) {
        for (slot, cell) in traj.observed_slots() {
            let (xt, yt) = (X_BASE + cell.x, Y_BASE + cell.y);
            let dow = traj.dow as usize;
            exact[dow * slots + slot as usize].0.push(xt);
            exact[dow * slots + slot as usize].1.push(yt);
            by_dow[dow].0.push(xt);
            by_dow[dow].1.push(yt);
            all.0.push(xt);
            all.1.push(yt);
        }
    }

    // widen each slot entry by the window, then sort/dedup everything
    let mut widened: Vec<(Vec<TokenId>, Vec<TokenId>)> = vec![(Vec::new(), Vec::new()); 7 * slots];
    for dow in 0..7 {
        for slot in 0..slots {
            let lo = slot.saturating_sub(window as usize);
            let hi = (slot + window as usize).min(slots - 1);
            let entry = &mut widened[dow * slots + slot];
            for s in lo..=hi {
                entry.0.extend_from_slice(&exact[dow * slots + s].0);
                entry.1.extend_from_slice(&exact[dow * slots + s].1);
            }
            sort_dedup(&mut entry.0);
            sort_dedup(&mut entry.1);
        }
    }
    for e in by_dow.iter_mut() {
        sort_dedup(&mut e.0);
        sort_dedup(&mut e.1);
    }
    sort_dedup(&mut all.0);
    sort_dedup(&mut all.1);
    CandidateIndex { by_dow_slot: widened, by_dow, all }
}

fn sort_dedup(v: &mut Vec<TokenId>) {
    v.sort_unstable();
    v.dedup();
}

impl CandidateIndex {
    /// Raw (dow, slot) entry before any fallback.
    pub fn entry(&self, dow: u32, slot: u32) -> (&[TokenId], &[TokenId]) {
        let e = &self.by_dow_slot[dow as usize * SLOTS_PER_DAY as usize + slot as usize];
        (&e.0, &e.1)
    }

    pub fn x_candidates(&self, dow: u32, slot: u32) -> (Vec<TokenId>, FallbackTier) {
        self.candidates(dow, slot, true)
    }

    pub fn y_candidates(&self, dow: u32, slot: u32) -> (Vec<TokenId>, FallbackTier) {
        self.candidates(dow, slot, false)
    }

    fn candidates(&self, dow: u32, slot: u32, x_side: bool) -> (Vec<TokenId>, FallbackTier) {
        let pick = |pair: &(Vec<TokenId>, Vec<TokenId>)| {
            if x_side {
                pair.0.clone()
            } else {
                pair.1.clone()
            }
        };
        let e = pick(&self.by_dow_slot[dow as usize * SLOTS_PER_DAY as usize + slot as usize]);
        if !e.is_empty() {
            return (e, FallbackTier::DowSlotWindow);
        }
        let d = pick(&self.by_dow[dow as usize]);
        if !d.is_empty() {
            return (d, FallbackTier::DowUnion);
        }
        let a = pick(&self.all);
        if !a.is_empty() {
            return (a, FallbackTier::HistoryUnion);
        }
        let base = if x_side { X_BASE } else { Y_BASE };
        ((base..base + GRID_SIZE).collect(), FallbackTier::Unconstrained)
    }
}

/// Filtered next-token distribution: constraint mask, temperature, top-k,
/// top-p, renormalize — in that order. Entries are (token, probability),
/// highest probability first (token id breaks ties).
pub fn filtered_distribution(
    logits: &[f32],
    cfg: &GenConfig,
    allowed: Option<&[TokenId]>,
) -> Result<Vec<(TokenId, f64)>, GenError> {
    cfg.validate()?;
    let mut pool: Vec<(TokenId, f64)> = match allowed {
        Some(ids) => {
            ids.iter().map(|&t| (t, logits[t as usize] as f64 / cfg.temperature)).collect()
        }
        None => logits
            .iter()
            .enumerate()
            .map(|(t, &l)| (t as TokenId, l as f64 / cfg.temperature))
            .collect(),
    };
    pool.retain(|(_, l)| !l.is_nan());
    if pool.is_empty() || pool.iter().all(|(_, l)| *l == f64::NEG_INFINITY) {
        return Err(GenError::ImpossibleConstraint);
    }
    let max = pool.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (_, l) in pool.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for (_, l) in pool.iter_mut() {
        *l /= sum;
    }
    pool.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    pool.truncate(cfg.top_k);
    if cfg.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = pool.len();
        for (i, (_, p)) in pool.iter().enumerate() {
            cum += *p;
            if cum >= cfg.top_p {
                keep = i + 1;
                break;
            }
        }
        pool.truncate(keep);
    }
    let z: f64 = pool.iter().map(|(_, p)| *p).sum();
    for (_, p) in pool.iter_mut() {
        *p /= z;
    }
    Ok(pool)
}

/// Outcome of one constrained sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleOutcome {
    pub token: TokenId,
    pub prob: f64,
    /// Rank of the chosen token within the filtered distribution (0 = mode).
    pub rank: usize,
    /// Size of the filtered distribution actually sampled from.
    pub dist_size: usize,
}

/// Sample by inverse CDF over the filtered distribution.
pub fn sample_token(
    logits: &[f32],
    cfg: &GenConfig,
    allowed: Option<&[TokenId]>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome, GenError> {
    let dist = filtered_distribution(logits, cfg, allowed)?;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (rank, (token, p)) in dist.iter().enumerate() {
        cum += *p;
        if u < cum {
            return Ok(SampleOutcome { token: *token, prob: *p, rank, dist_size: dist.len() });
        }
    }
    let rank = dist.len() - 1;
    let (token, p) = dist[rank];
    Ok(SampleOutcome { token, prob: p, rank, dist_size: dist.len() })
}

/// Which coordinate a sampled token fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoordKind {
    X,
    Y,
}

/// One line of the decoding audit log.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub uid: u32,
    pub day: u32,
    pub slot: u32,
    pub kind: CoordKind,
    pub tier: FallbackTier,
    pub candidate_set_size: usize,
    pub token: TokenId,
    pub rank: usize,
    pub prob: f64,
    pub dist_size: usize,
}

/// A generated day plus its audit trail.
pub struct GeneratedDay {
    pub day: DayTrajectory,
    pub audit: Vec<AuditRecord>,
}

/// Generate one day. `context` must end with `<|sep|>`; the signature's dow
/// token is force-appended, then slots are walked in order.
#[allow(clippy::too_many_arguments)]
pub fn generate_day(
    params: &ModelParams<f32>,
    context: &[TokenId],
    signature: &TargetSignature,
    candidates: &CandidateIndex,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
    uid: u32,
    day_number: u32,
) -> Result<GeneratedDay, GenError> {
    cfg.validate()?;
    if context.last() != Some(&SEP) {
        return Err(GenError::ContextNotSepTerminated);
    }
    let mut session = Session::new(params);
    session.extend(context)?;
    let mut logits = session.append(dow_token(signature.dow))?;

    let mut day = DayTrajectory::empty(signature.dow);
    let mut audit = Vec::new();
    for slot in 0..SLOTS_PER_DAY {
        if !signature.predict[slot as usize] {
            logits = session.append(EMPTY_SLOT)?;
            continue;
        }
        let (xs, x_tier) = candidates.x_candidates(signature.dow, slot);
        let x_out = sample_token(&logits, cfg, Some(&xs), rng)?;
        audit.push(AuditRecord {
            uid,
            day: day_number,
            slot,
            kind: CoordKind::X,
            tier: x_tier,
            candidate_set_size: xs.len(),
            token: x_out.token,
            rank: x_out.rank,
            prob: x_out.prob,
            dist_size: x_out.dist_size,
        });
        logits = session.append(x_out.token)?;

        let (ys, y_tier) = candidates.y_candidates(signature.dow, slot);
        let y_out = sample_token(&logits, cfg, Some(&ys), rng)?;
        audit.push(AuditRecord {
            uid,
            day: day_number,
            slot,
            kind: CoordKind::Y,
            tier: y_tier,
            candidate_set_size: ys.len(),
            token: y_out.token,
            rank: y_out.rank,
            prob: y_out.prob,
            dist_size: y_out.dist_size,
        });
        logits = session.append(y_out.token)?;

        day.slots[slot as usize] =
            Some(GridCell { x: x_out.token - X_BASE, y: y_out.token - Y_BASE });
    }
    Ok(GeneratedDay { day, audit })
}

pub struct PredictOutput {
    pub pings: Vec<PingRecord>,
    pub audit: Vec<AuditRecord>,
    pub generated_days: Vec<(u32, DayTrajectory)>,
}

/// Rolling multi-day prediction for one user.
///
/// `signatures` pairs each target day with its scaffold, in ascending day
/// order. The context for day `d` is the 7 calendar days before it, drawn
/// from observed pre-horizon data and (when `cfg.rolling`) previously
/// generated days; gaps become all-absent days. The candidate index is built
/// once, from pre-horizon data only.
pub fn predict_horizon(
    params: &ModelParams<f32>,
    history: &UserHistory,
    signatures: &[(u32, TargetSignature)],
    horizon_day: u32,
    cfg: &GenConfig,
) -> Result<PredictOutput, GenError> {
    cfg.validate()?;
    let pre_days = history.days.range(..horizon_day).count();
    let need = WINDOW_DAYS as usize - 1;
    if pre_days < need {
        return Err(GenError::InsufficientContext { uid: history.uid, have: pre_days, need });
    }
    let candidates = build_candidate_index(history, horizon_day, cfg.candidate_window);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(cfg.seed, history.uid as u64));

    let mut working: BTreeMap<u32, DayTrajectory> =
        history.days.range(..horizon_day).map(|(d, t)| (*d, t.clone())).collect();
    let mut pings = Vec::new();
    let mut audit = Vec::new();
    let mut generated_days = Vec::new();

    for (day, sig) in signatures {
        let mut context = encode_uid(history.uid);
        context.push(DATA_MARK);
        for d in day - (WINDOW_DAYS - 1)..*day {
            match working.get(&d) {
                Some(traj) => context.extend(encode_day(traj)),
                None => context
                    .extend(encode_day(&DayTrajectory::empty(dow_of(d, history.dow_offset)))),
            }
        }
        context.push(SEP);
        let gen =
            generate_day(params, &context, sig, &candidates, cfg, &mut rng, history.uid, *day)?;
        for (slot, cell) in gen.day.observed_slots() {
            pings.push(PingRecord { uid: history.uid, day: *day, slot, x: cell.x, y: cell.y });
        }
        audit.extend(gen.audit);
        let roll = if cfg.rolling { gen.day.clone() } else { DayTrajectory::empty(gen.day.dow) };
        working.insert(*day, roll);
        generated_days.push((*day, gen.day));
    }
    Ok(PredictOutput { pings, audit, generated_days })
}

/// Derive signatures for `days` from a user's true post-horizon trajectory:
/// predict exactly the slots observed in truth; days with no data are
/// all-skip.
pub fn signatures_from_truth(history: &UserHistory, days: Range<u32>) -> Vec<(u32, TargetSignature)> {
    days.map(|d| {
        let sig = match history.days.get(&d) {
            Some(traj) => signature_from_day(traj),
            None => TargetSignature {
                dow: dow_of(d, history.dow_offset),
                predict: [false; SLOTS_PER_DAY as usize],
            },
        };
        (d, sig)
    })
    .collect()
}

/// Model-driven prediction for many users; per-user jobs run independently
/// (derived RNG streams) and in parallel, output ordered by uid.
pub fn predict_users(
    params: &ModelParams<f32>,
    histories: &BTreeMap<u32, UserHistory>,
    uids: &[u32],
    days: Range<u32>,
    horizon_day: u32,
    cfg: &GenConfig,
) -> Result<PredictOutput, GenError> {
    let jobs: Vec<&UserHistory> = uids
        .iter()
        .map(|uid| histories.get(uid).ok_or(GenError::MissingUser(*uid)))
        .collect::<Result<_, _>>()?;
    let results = crate::parallel::map_independent(jobs, |hist| {
        let sigs = signatures_from_truth(hist, days.clone());
        predict_horizon(params, hist, &sigs, horizon_day, cfg)
    });
    let mut out =
        PredictOutput { pings: Vec::new(), audit: Vec::new(), generated_days: Vec::new() };
    for r in results {
        let r = r?;
        out.pings.extend(r.pings);
        out.audit.extend(r.audit);
    }
    Ok(out)
}

/// Reference predictor: uniform-random choice within the same candidate
/// sets (same fallback chain), no model. The floor any trained model must
/// clear.
pub fn predict_users_baseline(
    histories: &BTreeMap<u32, UserHistory>,
    uids: &[u32],
    days: Range<u32>,
    horizon_day: u32,
    candidate_window: u32,
    seed: u64,
) -> Result<Vec<PingRecord>, GenError> {
    let jobs: Vec<&UserHistory> = uids
        .iter()
        .map(|uid| histories.get(uid).ok_or(GenError::MissingUser(*uid)))
        .collect::<Result<_, _>>()?;
    let results = crate::parallel::map_independent(jobs, |hist| {
        let candidates = build_candidate_index(hist, horizon_day, candidate_window);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(seed, hist.uid as u64));
        let mut pings = Vec::new();
        for (day, sig) in signatures_from_truth(hist, days.clone()) {
            for slot in 0..SLOTS_PER_DAY {
                if !sig.predict[slot as usize] {
                    continue;
                }
                let (xs, _) = candidates.x_candidates(sig.dow, slot);
                let (ys, _) = candidates.y_candidates(sig.dow, slot);
                let xt = xs[rng.gen_range(0..xs.len())];
                let yt = ys[rng.gen_range(0..ys.len())];
                pings.push(PingRecord { uid: hist.uid, day, slot, x: xt - X_BASE, y: yt - Y_BASE });
            }
        }
        pings
    });
    Ok(results.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_histories;
    use crate::model::{init_model, ModelConfig};
    use crate::vocab::VOCAB_SIZE;

    fn test_cfg(seed: u64) -> GenConfig {
        GenConfig { seed, ..GenConfig::default() }
    }

    fn history_with_ping(dow_offset: u32, pings: &[(u32, u32, u32, u32)]) -> UserHistory {
        // (day, slot, x, y)
        let recs: Vec<PingRecord> =
            pings.iter().map(|&(d, t, x, y)| PingRecord::new(9, d, t, x, y).unwrap()).collect();
        build_histories(&recs, dow_offset).remove(&9).unwrap()
    }

    #[test]
    fn candidate_window_covers_neighbor_slots() {
        // single ping at dow 5, slot 12 (day 5 with offset 0 has dow 5)
        let hist = history_with_ping(0, &[(5, 12, 129, 88)]);
        let idx = build_candidate_index(&hist, 60, 2);
        for t in 10..=14u32 {
            let (xs, tier) = idx.x_candidates(5, t);
            assert_eq!(xs, vec![X_BASE + 129]);
            assert_eq!(tier, FallbackTier::DowSlotWindow);
            let (ys, _) = idx.y_candidates(5, t);
            assert_eq!(ys, vec![Y_BASE + 88]);
        }
        let (_, tier) = idx.x_candidates(5, 15);
        assert_eq!(tier, FallbackTier::DowUnion);
    }

    #[test]
    fn fallback_chain_tiers() {
        let hist = history_with_ping(0, &[(5, 12, 129, 88)]);
        let idx = build_candidate_index(&hist, 60, 2);
        // same dow, distant slot -> dow union
        let (xs, tier) = idx.x_candidates(5, 40);
        assert_eq!(tier, FallbackTier::DowUnion);
        assert_eq!(xs, vec![X_BASE + 129]);
        // different dow -> history union
        let (xs, tier) = idx.x_candidates(2, 12);
        assert_eq!(tier, FallbackTier::HistoryUnion);
        assert_eq!(xs, vec![X_BASE + 129]);
    }

    #[test]
    fn empty_history_falls_back_to_unconstrained() {
        let hist = history_with_ping(0, &[(61, 0, 1, 1)]); // only post-horizon data
        let idx = build_candidate_index(&hist, 60, 2);
        let (xs, tier) = idx.x_candidates(0, 0);
        assert_eq!(tier, FallbackTier::Unconstrained);
        assert_eq!(xs.len(), 500);
        assert!(xs.iter().all(|t| crate::vocab::is_x_token(*t)));
        let (ys, tier) = idx.y_candidates(0, 0);
        assert_eq!(tier, FallbackTier::Unconstrained);
        assert!(ys.iter().all(|t| crate::vocab::is_y_token(*t)));
    }

    #[test]
    fn window_clamps_at_slot_zero() {
        let hist = history_with_ping(0, &[(5, 1, 7, 7)]);
        let idx = build_candidate_index(&hist, 60, 2);
        let (xs, tier) = idx.x_candidates(5, 0);
        assert_eq!(tier, FallbackTier::DowSlotWindow);
        assert_eq!(xs, vec![X_BASE + 7]);
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let mut logits = vec![0.0f32; VOCAB_SIZE];
        logits[100] = 3.0;
        logits[200] = 2.9;
        let cfg = GenConfig { temperature: 1e-4, seed: 5, ..GenConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = sample_token(&logits, &cfg, None, &mut rng).unwrap();
            assert_eq!(s.token, 100);
        }
    }

    #[test]
    fn singleton_allowed_set_is_deterministic() {
        let logits = vec![0.5f32; VOCAB_SIZE];
        let cfg = test_cfg(1);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_token(&logits, &cfg, Some(&[321]), &mut rng).unwrap();
            assert_eq!(s.token, 321);
            assert_eq!(s.prob, 1.0);
        }
    }

    #[test]
    fn top_k_one_is_greedy_at_any_temperature() {
        let mut logits = vec![0.0f32; 50];
        logits[7] = 1.0;
        for temp in [0.2, 1.0, 3.0] {
            let cfg = GenConfig { top_k: 1, temperature: temp, ..GenConfig::default() };
            let dist = filtered_distribution(&logits, &cfg, None).unwrap();
            assert_eq!(dist.len(), 1);
            assert_eq!(dist[0].0, 7);
            assert!((dist[0].1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_support_is_monotone() {
        let mut logits = vec![0.0f32; 30];
        for (i, l) in logits.iter_mut().enumerate() {
            *l = (i as f32 * 0.37).sin();
        }
        let allowed: Vec<TokenId> = (0..30).collect();
        for a in 1..6usize {
            let ca = GenConfig { top_k: a, ..GenConfig::default() };
            let cb = GenConfig { top_k: a + 1, ..GenConfig::default() };
            let sa: Vec<TokenId> = filtered_distribution(&logits, &ca, Some(&allowed))
                .unwrap()
                .iter()
                .map(|e| e.0)
                .collect();
            let sb: Vec<TokenId> = filtered_distribution(&logits, &cb, Some(&allowed))
                .unwrap()
                .iter()
                .map(|e| e.0)
                .collect();
            for t in &sa {
                assert!(sb.contains(t), "top_k {a} support not subset of {}", a + 1);
            }
        }
    }

    #[test]
    fn top_p_truncates_to_smallest_prefix() {
        let mut logits = vec![f32::NEG_INFINITY; 10];
        logits[0] = 8.0f32.ln();
        logits[1] = 4.0f32.ln();
        logits[2] = 2.0f32.ln();
        logits[3] = 1.0f32.ln();
        let cfg = GenConfig { top_p: 0.7, top_k: 10, ..GenConfig::default() };
        let dist = filtered_distribution(&logits, &cfg, Some(&[0, 1, 2, 3])).unwrap();
        // probs 8/15, 4/15: cumulative 0.8 >= 0.7 after two entries
        assert_eq!(dist.len(), 2);
    }

    #[test]
    fn all_masked_is_impossible_constraint() {
        let logits = vec![f32::NEG_INFINITY; 10];
        let cfg = test_cfg(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_token(&logits, &cfg, Some(&[1, 2]), &mut rng),
            Err(GenError::ImpossibleConstraint)
        ));
    }

    fn small_model() -> ModelParams<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            dropout: 0.0,
            vocab_size: VOCAB_SIZE,
            context_len: 1024,
            seed: 77,
        };
        init_model(&cfg).unwrap()
    }

    fn dense_history(uid: u32, days: u32) -> UserHistory {
        let mut recs = Vec::new();
        for d in 0..days {
            for t in (0..48).step_by(3) {
                recs.push(PingRecord::new(uid, d, t, 50 + (t % 5), 60 + (d % 3)).unwrap());
            }
        }
        build_histories(&recs, 0).remove(&uid).unwrap()
    }

    #[test]
    fn all_skip_signature_generates_empty_day() {
        let params = small_model();
        let hist = dense_history(3, 10);
        let idx = build_candidate_index(&hist, 60, 2);
        let sig = TargetSignature { dow: 2, predict: [false; 48] };
        let mut context = encode_uid(3);
        context.push(DATA_MARK);
        for d in 0..7 {
            context.extend(encode_day(&hist.days[&d]));
        }
        context.push(SEP);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen =
            generate_day(&params, &context, &sig, &idx, &test_cfg(0), &mut rng, 3, 7).unwrap();
        assert_eq!(gen.day.n_observed(), 0);
        assert!(gen.audit.is_empty());
    }

    #[test]
    fn generated_day_matches_signature_and_candidates() {
        let params = small_model();
        let hist = dense_history(3, 10);
        let idx = build_candidate_index(&hist, 60, 2);
        let mut predict = [false; 48];
        predict[3] = true;
        predict[40] = true;
        let sig = TargetSignature { dow: 0, predict };
        let mut context = encode_uid(3);
        context.push(DATA_MARK);
        for d in 0..7 {
            context.extend(encode_day(&hist.days[&d]));
        }
        context.push(SEP);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen =
            generate_day(&params, &context, &sig, &idx, &test_cfg(4), &mut rng, 3, 7).unwrap();
        for s in 0..48usize {
            assert_eq!(gen.day.slots[s].is_some(), predict[s], "slot {s} violates signature");
        }
        assert_eq!(gen.audit.len(), 4);
        for rec in &gen.audit {
            let (xs, _) = idx.x_candidates(sig.dow, rec.slot);
            let (ys, _) = idx.y_candidates(sig.dow, rec.slot);
            let in_set = match rec.kind {
                CoordKind::X => xs.contains(&rec.token),
                CoordKind::Y => ys.contains(&rec.token),
            };
            assert!(in_set, "audit token outside candidate set");
        }
    }

    #[test]
    fn context_must_end_with_sep() {
        let params = small_model();
        let hist = dense_history(3, 10);
        let idx = build_candidate_index(&hist, 60, 2);
        let sig = TargetSignature { dow: 0, predict: [false; 48] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = generate_day(&params, &[DATA_MARK], &sig, &idx, &test_cfg(0), &mut rng, 0, 0);
        assert!(matches!(res, Err(GenError::ContextNotSepTerminated)));
    }

    #[test]
    fn predict_horizon_deterministic_under_top_k_one() {
        let params = small_model();
        let mut recs = Vec::new();
        for d in 0..65u32 {
            for t in (0..48).step_by(4) {
                recs.push(PingRecord::new(4, d, t, 100 + (t % 7), 200 + (d % 2)).unwrap());
            }
        }
        let hist = build_histories(&recs, 0).remove(&4).unwrap();
        let sigs = signatures_from_truth(&hist, 60..63);
        let cfg = GenConfig { top_k: 1, seed: 5, ..GenConfig::default() };
        let a = predict_horizon(&params, &hist, &sigs, 60, &cfg).unwrap();
        let b = predict_horizon(&params, &hist, &sigs, 60, &cfg).unwrap();
        assert_eq!(a.pings, b.pings);
        let expected: usize = sigs.iter().map(|(_, s)| s.n_predict()).sum();
        assert_eq!(a.pings.len(), expected);
    }

    #[test]
    fn predict_requires_seven_context_days() {
        let params = small_model();
        let recs: Vec<PingRecord> =
            (55..62).map(|d| PingRecord::new(1, d, 0, 1, 1).unwrap()).collect();
        let hist = build_histories(&recs, 0).remove(&1).unwrap();
        let sigs = signatures_from_truth(&hist, 60..61);
        let res = predict_horizon(&params, &hist, &sigs, 60, &test_cfg(0));
        assert!(matches!(res, Err(GenError::InsufficientContext { .. })));
    }

    #[test]
    fn all_skip_horizon_produces_no_pings() {
        let params = small_model();
        let hist = dense_history(6, 20); // no data past day 19 -> all-skip signatures
        let sigs = signatures_from_truth(&hist, 60..75);
        assert!(sigs.iter().all(|(_, s)| s.n_predict() == 0));
        let out = predict_horizon(&params, &hist, &sigs, 60, &test_cfg(0)).unwrap();
        assert!(out.pings.is_empty());
    }

    #[test]
    fn baseline_tokens_come_from_candidate_sets() {
        let mut recs = Vec::new();
        for d in 0..65u32 {
            recs.push(PingRecord::new(8, d, 10, 30, 40).unwrap());
        }
        let histories = build_histories(&recs, 0);
        let pings = predict_users_baseline(&histories, &[8], 60..65, 60, 2, 3).unwrap();
        assert!(!pings.is_empty());
        for p in &pings {
            assert_eq!((p.x, p.y), (30, 40), "baseline must reuse the only candidate");
        }
    }
}
