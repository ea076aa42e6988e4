//! Trajectory scoring: DTW, GEO-BLEU, aggregate evaluation, and the
//! temperature/top-k sweep.
//!
//! DTW is the anchored dynamic program
//! `D[i][j] = d(a_i, b_j) + min(D[i-1][j], D[i][j-1], D[i-1][j-1])` with
//! `D[0][0] = d(a_0, b_0)`; lower is better. A path-enumerating brute force
//! (`dtw_bruteforce`, lengths <= 6) serves as its independent oracle.
//!
//! GEO-BLEU forms n-grams (n = 1..max_n) of both sequences, scores pairs by
//! `exp(-beta * sum of pointwise distances)`, greedily matches generated
//! n-grams to distinct reference n-grams in descending similarity, and
//! combines the per-n precisions into a brevity-penalized geometric mean.
//! Higher is better, 1.0 on identical sequences.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use crate::data::{GridCell, PingRecord, UserHistory};
use crate::generate::{predict_users, GenConfig, GenError};
use crate::model::ModelParams;
use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("cannot score an empty sequence")]
    EmptySequence,
    #[error("brute-force DTW capped at length {max}, got {got}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("prediction/truth key mismatch: {missing_in_truth} keys absent from truth, {missing_in_pred} absent from predictions; first few: {examples:?}")]
    KeyMismatch { missing_in_truth: usize, missing_in_pred: usize, examples: Vec<(u32, u32, u32)> },
    #[error(transparent)]
    Gen(#[from] GenError),
}

/// Anchored DTW distance between two non-empty point sequences.
pub fn dtw(a: &[GridCell], b: &[GridCell]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut curr = vec![0.0f64; m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let cost = pa.euclid(pb);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => curr[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(curr[j - 1]).min(prev[j - 1]),
            };
            curr[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m - 1])
}

/// Exhaustive minimum over all monotone warping paths; oracle for [`dtw`].
pub fn dtw_bruteforce(a: &[GridCell], b: &[GridCell]) -> Result<f64, MetricError> {
    const MAX: usize = 6;
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    if a.len() > MAX || b.len() > MAX {
        return Err(MetricError::SequenceTooLong { got: a.len().max(b.len()), max: MAX });
    }
    // Forward enumeration, folding `cost + acc` exactly like the DP does so
    // the two routes agree bit for bit, not just within tolerance.
    fn walk(a: &[GridCell], b: &[GridCell], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = a[i].euclid(&b[j]) + acc;
        if i == a.len() - 1 && j == b.len() - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    Ok(best)
}

#[derive(Debug, Clone, Serialize)]
pub struct GeoBleuParams {
    pub max_n: usize,
    pub beta: f64,
}

impl Default for GeoBleuParams {
    fn default() -> Self {
        GeoBleuParams { max_n: 3, beta: 0.5 }
    }
}

/// Spatially-softened BLEU between a generated and a reference sequence.
pub fn geo_bleu(gen: &[GridCell], reference: &[GridCell], p: &GeoBleuParams) -> Result<f64, MetricError> {
    if gen.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    assert!(p.max_n >= 1 && p.beta > 0.0, "invalid GEO-BLEU params");
    let mut log_precisions = Vec::new();
    for n in 1..=p.max_n {
        if gen.len() < n || reference.len() < n {
            continue; // weights renormalize over the n-gram sizes actually used
        }
        let pn = ngram_precision(gen, reference, n, p.beta);
        if pn == 0.0 {
            return Ok(0.0);
        }
        log_precisions.push(pn.ln());
    }
    if log_precisions.is_empty() {
        return Ok(0.0);
    }
    let mean_log = log_precisions.iter().sum::<f64>() / log_precisions.len() as f64;
    let bp = (1.0 - reference.len() as f64 / gen.len() as f64).exp().min(1.0);
    Ok(bp * mean_log.exp())
}

/// Greedy similarity-matched n-gram precision.
fn ngram_precision(gen: &[GridCell], reference: &[GridCell], n: usize, beta: f64) -> f64 {
    let n_gen = gen.len() - n + 1;
    let n_ref = reference.len() - n + 1;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n_gen * n_ref);
    for i in 0..n_gen {
        for j in 0..n_ref {
            let mut dist = 0.0;
            for k in 0..n {
                dist += gen[i + k].euclid(&reference[j + k]);
            }
            pairs.push(((-beta * dist).exp(), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_gen = vec![false; n_gen];
    let mut used_ref = vec![false; n_ref];
    let mut matched = 0.0f64;
    for (sim, i, j) in pairs {
        if used_gen[i] || used_ref[j] {
            continue;
        }
        used_gen[i] = true;
        used_ref[j] = true;
        matched += sim;
    }
    matched / n_gen as f64
}

/// How GEO-BLEU aggregates: per (user, day) — the default — or once per user
/// over the concatenated horizon. DTW always scores the concatenated
/// per-user trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    PerUserDay,
    PerUserTrajectory,
}

#[derive(Debug, Clone, Serialize)]
pub struct UserScores {
    pub uid: u32,
    pub dtw: f64,
    /// Mean GEO-BLEU over this user's scored groups.
    pub geo_bleu: f64,
    pub n_days: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mean_dtw: f64,
    pub mean_geo_bleu: f64,
    pub n_users: usize,
    pub n_user_days: usize,
    pub grouping: Grouping,
    pub bleu_params: GeoBleuParams,
    pub per_user: Vec<UserScores>,
}

type SlotMap = BTreeMap<(u32, u32), BTreeMap<u32, GridCell>>; // (uid, day) -> slot -> cell

fn group_records(records: &[PingRecord]) -> SlotMap {
    let mut map: SlotMap = BTreeMap::new();
    for r in records {
        map.entry((r.uid, r.day)).or_default().insert(r.slot, r.cell());
    }
    map
}

/// Score predictions against truth. Both sides must cover exactly the same
/// (uid, day, slot) keys; a mismatch reports the missing keys. GEO-BLEU is
/// averaged per `grouping`; DTW per user over the slot-ordered concatenation
/// of all predicted days.
pub fn evaluate(
    predictions: &[PingRecord],
    truth: &[PingRecord],
    grouping: Grouping,
    bleu: &GeoBleuParams,
) -> Result<EvalReport, MetricError> {
    let pred = group_records(predictions);
    let tru = group_records(truth);
    check_keys(&pred, &tru)?;
    if pred.is_empty() {
        return Err(MetricError::EmptySequence);
    }

    let mut per_user_days: BTreeMap<u32, Vec<(u32, Vec<GridCell>, Vec<GridCell>)>> = BTreeMap::new();
    for ((uid, day), slots) in &pred {
        let tslots = &tru[&(*uid, *day)];
        let p: Vec<GridCell> = slots.values().copied().collect();
        let t: Vec<GridCell> = tslots.values().copied().collect();
        per_user_days.entry(*uid).or_default().push((*day, p, t));
    }

    // Per-user scoring is independent; run it on the worker pool.
    let jobs: Vec<(u32, Vec<(u32, Vec<GridCell>, Vec<GridCell>)>)> =
        per_user_days.into_iter().collect();
    let scored = crate::parallel::map_independent(jobs, |(uid, days)| -> Result<_, MetricError> {
        let concat_p: Vec<GridCell> = days.iter().flat_map(|(_, p, _)| p.iter().copied()).collect();
        let concat_t: Vec<GridCell> = days.iter().flat_map(|(_, _, t)| t.iter().copied()).collect();
        let user_dtw = dtw(&concat_p, &concat_t)?;
        let (sum, groups) = match grouping {
            Grouping::PerUserDay => {
                let mut s = 0.0;
                for (_, p, t) in &days {
                    s += geo_bleu(p, t, bleu)?;
                }
                (s, days.len())
            }
            Grouping::PerUserTrajectory => (geo_bleu(&concat_p, &concat_t, bleu)?, 1),
        };
        Ok((uid, user_dtw, sum, groups, days.len()))
    });

    let mut per_user = Vec::new();
    let mut dtw_sum = 0.0;
    let mut bleu_sum = 0.0;
    let mut bleu_groups = 0usize;
    let mut n_user_days = 0usize;
    for res in scored {
        let (uid, user_dtw, sum, groups, n_days) = res?;
        dtw_sum += user_dtw;
        bleu_sum += sum;
        bleu_groups += groups;
        n_user_days += n_days;
        per_user.push(UserScores {
            uid,
            dtw: user_dtw,
            geo_bleu: sum / groups as f64,
            n_days,
        });
    }

    Ok(EvalReport {
        mean_dtw: dtw_sum / per_user.len() as f64,
        mean_geo_bleu: bleu_sum / bleu_groups as f64,
        n_users: per_user.len(),
        n_user_days,
        grouping,
        bleu_params: bleu.clone(),
        per_user,
    })
}

fn check_keys(pred: &SlotMap, tru: &SlotMap) -> Result<(), MetricError> {
    let mut missing_in_truth = Vec::new();
    let mut missing_in_pred = Vec::new();
    for ((uid, day), slots) in pred {
        match tru.get(&(*uid, *day)) {
            None => missing_in_truth.extend(slots.keys().map(|s| (*uid, *day, *s))),
            Some(t) => {
                missing_in_truth
                    .extend(slots.keys().filter(|s| !t.contains_key(s)).map(|s| (*uid, *day, *s)));
            }
        }
    }
    for ((uid, day), slots) in tru {
        match pred.get(&(*uid, *day)) {
            None => missing_in_pred.extend(slots.keys().map(|s| (*uid, *day, *s))),
            Some(p) => {
                missing_in_pred
                    .extend(slots.keys().filter(|s| !p.contains_key(s)).map(|s| (*uid, *day, *s)));
            }
        }
    }
    if missing_in_truth.is_empty() && missing_in_pred.is_empty() {
        return Ok(());
    }
    let mut examples: Vec<(u32, u32, u32)> = missing_in_truth
        .iter()
        .chain(missing_in_pred.iter())
        .take(8)
        .copied()
        .collect();
    examples.sort_unstable();
    Err(MetricError::KeyMismatch {
        missing_in_truth: missing_in_truth.len(),
        missing_in_pred: missing_in_pred.len(),
        examples,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub top_k: usize,
    pub geo_bleu: f64,
    pub dtw: f64,
    pub seed: u64,
}

/// Full factorial sweep over temperature x top-k. Each cell runs a complete
/// prediction pass with its own derived seed and is scored against truth.
#[allow(clippy::too_many_arguments)]
pub fn sweep_generation(
    params: &ModelParams<f32>,
    histories: &BTreeMap<u32, UserHistory>,
    uids: &[u32],
    days: Range<u32>,
    horizon_day: u32,
    truth: &[PingRecord],
    base: &GenConfig,
    temperatures: &[f64],
    top_ks: &[usize],
    grouping: Grouping,
    bleu: &GeoBleuParams,
) -> Result<Vec<SweepRow>, MetricError> {
    let mut rows = Vec::new();
    for &temperature in temperatures {
        for &top_k in top_ks {
            let seed = seeds::mix3(base.seed, temperature.to_bits(), top_k as u64);
            let cfg = GenConfig { temperature, top_k, seed, ..base.clone() };
            let out = predict_users(params, histories, uids, days.clone(), horizon_day, &cfg)?;
            let report = evaluate(&out.pings, truth, grouping, bleu)?;
            rows.push(SweepRow {
                temperature,
                top_k,
                geo_bleu: report.mean_geo_bleu,
                dtw: report.mean_dtw,
                seed,
            });
        }
    }
    Ok(rows)
}

/// CSV rendering of sweep rows (`temperature,top_k,geobleu,dtw,seed`).
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("temperature,top_k,geobleu,dtw,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.temperature, r.top_k, r.geo_bleu, r.dtw, r.seed));
    }
    s
}
