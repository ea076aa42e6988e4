//! Bidirectional mapping between trajectories and token sequences.
//!
//! A linearized 8-day window:
//!
//! ```text
//! <uid digits> <|data|> <day block> x7 <|sep|> <day block> <eos>
//! ```
//!
//! where a day block is a `<|dowK|>` token followed by 48 slot encodings —
//! `N` for an absent slot, or an x-token immediately followed by a y-token.
//! Target signatures are the textual per-day scaffold (`6NNNNxy...`): one
//! day-of-week digit then 48 items from `{N, xy}` marking which slots the
//! generator must fill.

use crate::data::{DayTrajectory, GridCell, UserHistory};
use crate::vocab::{
    self, digit_token, dow_token, x_token, y_token, TokenId, DATA_MARK, DIGIT_BASE, DOW_BASE,
    EMPTY_SLOT, EOS, SEP, X_BASE, Y_BASE,
};
use crate::{SLOTS_PER_DAY, WINDOW_DAYS};

#[derive(Debug, thiserror::Error)]
pub enum LinearizeError {
    #[error("window [{start}, {start}+7] for uid {uid} extends outside the training view")]
    WindowOutsideView { uid: u32, start: u32 },
    #[error("day block starts with token {0}, not a dow token")]
    MissingDow(TokenId),
    #[error("dow mismatch: expected {expected}, found {found}")]
    DowMismatch { expected: u32, found: u32 },
    #[error("x token at position {0} not followed by a y token")]
    DanglingX(usize),
    #[error("unexpected token {token} at position {pos}")]
    UnexpectedToken { token: TokenId, pos: usize },
    #[error("day block has {0} slots, expected 48")]
    BadSlotCount(usize),
    #[error("bad signature: {0}")]
    BadSignature(String),
}

/// Decimal digits of `uid` as digit tokens, no padding.
pub fn encode_uid(uid: u32) -> Vec<TokenId> {
    uid.to_string().bytes().map(|b| digit_token((b - b'0') as u32)).collect()
}

/// Day block: dow token, then 48 slot encodings. Length in [49, 97].
pub fn encode_day(day: &DayTrajectory) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(1 + 2 * SLOTS_PER_DAY as usize);
    out.push(dow_token(day.dow));
    for slot in &day.slots {
        match slot {
            None => out.push(EMPTY_SLOT),
            Some(cell) => {
                out.push(x_token(cell.x));
                out.push(y_token(cell.y));
            }
        }
    }
    out
}

/// Inverse of [`encode_day`]. The block must start with the expected dow
/// token and contain exactly 48 slot encodings.
pub fn decode_day(tokens: &[TokenId], expected_dow: u32) -> Result<DayTrajectory, LinearizeError> {
    let first = *tokens.first().ok_or(LinearizeError::BadSlotCount(0))?;
    if !vocab::is_dow_token(first) {
        return Err(LinearizeError::MissingDow(first));
    }
    let found = first - DOW_BASE;
    if found != expected_dow {
        return Err(LinearizeError::DowMismatch { expected: expected_dow, found });
    }
    let mut day = DayTrajectory::empty(found);
    let mut slot = 0usize;
    let mut pos = 1usize;
    while pos < tokens.len() {
        if slot >= SLOTS_PER_DAY as usize {
            return Err(LinearizeError::BadSlotCount(slot + 1));
        }
        let tok = tokens[pos];
        if tok == EMPTY_SLOT {
            pos += 1;
        } else if vocab::is_x_token(tok) {
            let Some(&next) = tokens.get(pos + 1) else {
                return Err(LinearizeError::DanglingX(pos));
            };
            if !vocab::is_y_token(next) {
                return Err(LinearizeError::DanglingX(pos));
            }
            day.slots[slot] = Some(GridCell { x: tok - X_BASE, y: next - Y_BASE });
            pos += 2;
        } else {
            return Err(LinearizeError::UnexpectedToken { token: tok, pos });
        }
        slot += 1;
    }
    if slot != SLOTS_PER_DAY as usize {
        return Err(LinearizeError::BadSlotCount(slot));
    }
    Ok(day)
}

/// An 8-day window rendered as one token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedWindow {
    pub uid: u32,
    pub start_day: u32,
    pub tokens: Vec<TokenId>,
    /// Index of the `<|sep|>` token separating context from the target day.
    pub sep_pos: usize,
}

/// Linearize days `start_day ..= start_day + 7`. Every day must exist in the
/// history and lie strictly below `view_limit` (the exclusive bound on days
/// visible to training for this user).
pub fn linearize_window(
    history: &UserHistory,
    start_day: u32,
    view_limit: u32,
) -> Result<LinearizedWindow, LinearizeError> {
    let last = start_day + WINDOW_DAYS - 1;
    if last >= view_limit {
        return Err(LinearizeError::WindowOutsideView { uid: history.uid, start: start_day });
    }
    let mut days = Vec::with_capacity(WINDOW_DAYS as usize);
    for d in start_day..=last {
        match history.days.get(&d) {
            Some(traj) => days.push(traj),
            None => {
                return Err(LinearizeError::WindowOutsideView { uid: history.uid, start: start_day })
            }
        }
    }
    let mut tokens = encode_uid(history.uid);
    tokens.push(DATA_MARK);
    for traj in &days[..7] {
        tokens.extend(encode_day(traj));
    }
    let sep_pos = tokens.len();
    tokens.push(SEP);
    tokens.extend(encode_day(days[7]));
    tokens.push(EOS);
    Ok(LinearizedWindow { uid: history.uid, start_day, tokens, sep_pos })
}

/// Per-day generation scaffold: which slots to predict and which to skip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSignature {
    pub dow: u32,
    /// `true` = predict a coordinate at this slot, `false` = skip.
    pub predict: [bool; SLOTS_PER_DAY as usize],
}

impl TargetSignature {
    pub fn n_predict(&self) -> usize {
        self.predict.iter().filter(|p| **p).count()
    }
}

/// Parse the textual signature: one leading dow digit, then exactly 48 items
/// drawn from `N` (skip) and `xy` (predict).
pub fn parse_signature(text: &str) -> Result<TargetSignature, LinearizeError> {
    let mut chars = text.chars();
    let lead = chars
        .next()
        .ok_or_else(|| LinearizeError::BadSignature("empty signature".into()))?;
    let dow = lead
        .to_digit(10)
        .filter(|d| *d < 7)
        .ok_or_else(|| LinearizeError::BadSignature(format!("bad dow digit `{lead}`")))?;
    let mut predict = [false; SLOTS_PER_DAY as usize];
    let mut slot = 0usize;
    while let Some(c) = chars.next() {
        if slot >= SLOTS_PER_DAY as usize {
            return Err(LinearizeError::BadSignature("more than 48 items".into()));
        }
        match c {
            'N' => {}
            'x' => match chars.next() {
                Some('y') => predict[slot] = true,
                _ => {
                    return Err(LinearizeError::BadSignature(format!(
                        "`x` without `y` at item {slot}"
                    )))
                }
            },
            other => {
                return Err(LinearizeError::BadSignature(format!(
                    "illegal character `{other}` at item {slot}"
                )))
            }
        }
        slot += 1;
    }
    if slot != SLOTS_PER_DAY as usize {
        return Err(LinearizeError::BadSignature(format!("{slot} items, expected 48")));
    }
    Ok(TargetSignature { dow, predict })
}

/// Inverse of [`parse_signature`].
pub fn render_signature(sig: &TargetSignature) -> String {
    let mut s = String::with_capacity(1 + 2 * SLOTS_PER_DAY as usize);
    s.push(char::from_digit(sig.dow, 10).expect("dow < 7"));
    for p in &sig.predict {
        s.push_str(if *p { "xy" } else { "N" });
    }
    s
}

/// Signature matching a day's observation pattern: predict exactly where the
/// day has a cell.
pub fn signature_from_day(day: &DayTrajectory) -> TargetSignature {
    let mut predict = [false; SLOTS_PER_DAY as usize];
    for (slot, _) in day.observed_slots() {
        predict[slot as usize] = true;
    }
    TargetSignature { dow: day.dow, predict }
}

/// Render token ids in the human-readable form used by logs and docs.
pub fn tokens_to_string(tokens: &[TokenId], vocab: &vocab::Vocabulary) -> String {
    tokens.iter().map(|&t| vocab.token(t)).collect::<Vec<_>>().join("")
}

/// Digit-token sequence back to an integer (for parsing uid prefixes).
pub fn decode_uid(tokens: &[TokenId]) -> Option<u32> {
    if tokens.is_empty() {
        return None;
    }
    let mut uid: u32 = 0;
    for &t in tokens {
        if !(DIGIT_BASE..DIGIT_BASE + 10).contains(&t) {
            return None;
        }
        uid = uid.checked_mul(10)?.checked_add(t - DIGIT_BASE)?;
    }
    Some(uid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_histories, PingRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uid_71000_is_five_digit_tokens() {
        let toks = encode_uid(71000);
        let expect: Vec<TokenId> = [7u32, 1, 0, 0, 0].iter().map(|d| digit_token(*d)).collect();
        assert_eq!(toks, expect);
    }

    #[test]
    fn uid_zero_is_single_token() {
        assert_eq!(encode_uid(0), vec![digit_token(0)]);
        assert_eq!(encode_uid(305), vec![digit_token(3), digit_token(0), digit_token(5)]);
    }

    #[test]
    fn empty_day_is_dow_plus_48_n() {
        let day = DayTrajectory::empty(0);
        let toks = encode_day(&day);
        assert_eq!(toks.len(), 49);
        assert_eq!(toks[0], dow_token(0));
        assert!(toks[1..].iter().all(|t| *t == EMPTY_SLOT));
    }

    #[test]
    fn annex_fragment_dow6_slot19() {
        // <|dow6|> then 19 N then x129 y088
        let mut day = DayTrajectory::empty(6);
        day.slots[19] = Some(GridCell { x: 129, y: 88 });
        let toks = encode_day(&day);
        assert_eq!(toks[0], dow_token(6));
        assert!(toks[1..20].iter().all(|t| *t == EMPTY_SLOT));
        assert_eq!(toks[20], x_token(129));
        assert_eq!(toks[21], y_token(88));
        assert!(toks[22..].iter().all(|t| *t == EMPTY_SLOT));
        assert_eq!(toks.len(), 1 + 19 + 2 + 28);
        let back = decode_day(&toks, 6).unwrap();
        assert_eq!(back, day);
    }

    #[test]
    fn fully_observed_day_is_97_tokens() {
        let mut day = DayTrajectory::empty(3);
        for s in 0..48 {
            day.slots[s] = Some(GridCell { x: s as u32, y: 499 - s as u32 });
        }
        assert_eq!(encode_day(&day).len(), 97);
    }

    fn random_day(rng: &mut ChaCha8Rng) -> DayTrajectory {
        let mut day = DayTrajectory::empty(rng.gen_range(0..7));
        for s in 0..48 {
            if rng.gen_bool(0.5) {
                day.slots[s] =
                    Some(GridCell { x: rng.gen_range(0..500), y: rng.gen_range(0..500) });
            }
        }
        day
    }

    #[test]
    fn roundtrip_random_days() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let day = random_day(&mut rng);
            let back = decode_day(&encode_day(&day), day.dow).unwrap();
            assert_eq!(back, day);
        }
    }

    #[test]
    fn decode_rejects_dangling_x() {
        let mut toks = vec![dow_token(0), x_token(1)];
        toks.extend(std::iter::repeat(EMPTY_SLOT).take(47));
        assert!(matches!(decode_day(&toks, 0), Err(LinearizeError::DanglingX(_))));
    }

    #[test]
    fn decode_rejects_wrong_slot_count() {
        let mut toks = vec![dow_token(0)];
        toks.extend(std::iter::repeat(EMPTY_SLOT).take(47));
        assert!(matches!(decode_day(&toks, 0), Err(LinearizeError::BadSlotCount(47))));
    }

    #[test]
    fn decode_rejects_dow_mismatch() {
        let day = DayTrajectory::empty(2);
        let toks = encode_day(&day);
        assert!(matches!(
            decode_day(&toks, 3),
            Err(LinearizeError::DowMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn empty_window_has_396_tokens() {
        // uid 0 (1 digit) + <|data|> + 7*49 + <|sep|> + 49 + <eos>
        let recs = vec![
            PingRecord::new(0, 0, 0, 1, 1).unwrap(),
            PingRecord::new(0, 7, 0, 1, 1).unwrap(),
        ];
        let mut hist = build_histories(&recs, 0).remove(&0).unwrap();
        // blank out the two pings to make all 8 days empty
        hist.days.get_mut(&0).unwrap().slots[0] = None;
        hist.days.get_mut(&7).unwrap().slots[0] = None;
        let win = linearize_window(&hist, 0, 60).unwrap();
        assert_eq!(win.tokens.len(), 396);
        assert_eq!(win.tokens[win.sep_pos], SEP);
        assert_eq!(*win.tokens.last().unwrap(), EOS);
    }

    #[test]
    fn maximal_window_fits_context() {
        let mut recs = Vec::new();
        for d in 0..8u32 {
            for t in 0..48u32 {
                recs.push(PingRecord::new(123456, d, t, 10, 10).unwrap());
            }
        }
        let hist = build_histories(&recs, 0).remove(&123456).unwrap();
        let win = linearize_window(&hist, 0, 60).unwrap();
        assert_eq!(win.tokens.len(), 6 + 1 + 7 * 97 + 1 + 97 + 1);
        assert!(win.tokens.len() <= 1024);
    }

    #[test]
    fn window_outside_view_errors() {
        let recs = vec![
            PingRecord::new(0, 0, 0, 1, 1).unwrap(),
            PingRecord::new(0, 20, 0, 1, 1).unwrap(),
        ];
        let hist = build_histories(&recs, 0).remove(&0).unwrap();
        assert!(linearize_window(&hist, 15, 60).is_err()); // runs past observed span
        assert!(linearize_window(&hist, 5, 10).is_err()); // runs past view limit
        assert!(linearize_window(&hist, 5, 60).is_ok());
    }

    #[test]
    fn signature_annex_prefix() {
        let text = format!("6NNNNxy{}", "N".repeat(43));
        let sig = parse_signature(&text).unwrap();
        assert_eq!(sig.dow, 6);
        assert!(sig.predict[4]);
        assert_eq!(sig.n_predict(), 1);
    }

    #[test]
    fn signature_all_skip() {
        let text = format!("0{}", "N".repeat(48));
        let sig = parse_signature(&text).unwrap();
        assert_eq!(sig.dow, 0);
        assert_eq!(sig.n_predict(), 0);
    }

    #[test]
    fn signature_rejects_bad_inputs() {
        assert!(parse_signature(&format!("7{}", "N".repeat(48))).is_err()); // dow out of range
        assert!(parse_signature(&format!("0{}", "N".repeat(47))).is_err()); // too few
        assert!(parse_signature(&format!("0{}Q", "N".repeat(47))).is_err()); // bad char
        assert!(parse_signature(&format!("0{}xz", "N".repeat(47))).is_err()); // dangling x
    }

    #[test]
    fn signature_render_parse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let day = random_day(&mut rng);
            let sig = signature_from_day(&day);
            let back = parse_signature(&render_signature(&sig)).unwrap();
            assert_eq!(back, sig);
        }
    }

    #[test]
    fn signature_from_day_marks_observed_slots() {
        let mut day = DayTrajectory::empty(1);
        day.slots[3] = Some(GridCell { x: 0, y: 0 });
        day.slots[40] = Some(GridCell { x: 9, y: 9 });
        let sig = signature_from_day(&day);
        for s in 0..48 {
            assert_eq!(sig.predict[s], s == 3 || s == 40);
        }
    }

    #[test]
    fn decode_uid_inverts_encode_uid() {
        for uid in [0u32, 7, 42, 305, 71000, 4_294_967_295] {
            assert_eq!(decode_uid(&encode_uid(uid)), Some(uid));
        }
        assert_eq!(decode_uid(&[EOS]), None);
    }
}
