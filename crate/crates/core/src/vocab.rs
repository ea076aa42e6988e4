//! The fixed 1021-token vocabulary.
//!
//! Layout (ids are frozen; checkpoints depend on them):
//!
//! | ids      | tokens                      |
//! |----------|-----------------------------|
//! | 0..=2    | `<eos>`, `<|data|>`, `<|sep|>` |
//! | 3..=9    | `<|dow0|>` .. `<|dow6|>`    |
//! | 10..=19  | digits `0` .. `9`           |
//! | 20       | `N` (empty slot)            |
//! | 21..=520 | `x000` .. `x499`            |
//! | 521..=1020 | `y000` .. `y499`          |

use std::collections::BTreeMap;

use crate::GRID_SIZE;

pub type TokenId = u32;

pub const VOCAB_SIZE: usize = 1021;

pub const EOS: TokenId = 0;
pub const DATA_MARK: TokenId = 1;
pub const SEP: TokenId = 2;
pub const DOW_BASE: TokenId = 3;
pub const DIGIT_BASE: TokenId = 10;
pub const EMPTY_SLOT: TokenId = 20;
pub const X_BASE: TokenId = 21;
pub const Y_BASE: TokenId = 521;

/// Token id for day-of-week `w` (0..=6).
pub fn dow_token(w: u32) -> TokenId {
    assert!(w < 7, "dow {w} out of range");
    DOW_BASE + w
}

/// Token id for decimal digit `d` (0..=9).
pub fn digit_token(d: u32) -> TokenId {
    assert!(d < 10, "digit {d} out of range");
    DIGIT_BASE + d
}

/// Token id for x-coordinate `x` (0..=499).
pub fn x_token(x: u32) -> TokenId {
    assert!(x < GRID_SIZE, "x {x} out of range");
    X_BASE + x
}

/// Token id for y-coordinate `y` (0..=499).
pub fn y_token(y: u32) -> TokenId {
    assert!(y < GRID_SIZE, "y {y} out of range");
    Y_BASE + y
}

pub fn is_x_token(id: TokenId) -> bool {
    (X_BASE..X_BASE + GRID_SIZE).contains(&id)
}

pub fn is_y_token(id: TokenId) -> bool {
    (Y_BASE..Y_BASE + GRID_SIZE).contains(&id)
}

pub fn is_dow_token(id: TokenId) -> bool {
    (DOW_BASE..DOW_BASE + 7).contains(&id)
}

/// Ordered token list with both direction maps.
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    /// Build the fixed vocabulary. Always 1021 tokens in the frozen order.
    pub fn build() -> Self {
        let mut tokens: Vec<String> = Vec::with_capacity(VOCAB_SIZE);
        tokens.push("<eos>".into());
        tokens.push("<|data|>".into());
        tokens.push("<|sep|>".into());
        for w in 0..7 {
            tokens.push(format!("<|dow{w}|>"));
        }
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        tokens.push("N".into());
        for x in 0..GRID_SIZE {
            tokens.push(format!("x{x:03}"));
        }
        for y in 0..GRID_SIZE {
            tokens.push(format!("y{y:03}"));
        }
        debug_assert_eq!(tokens.len(), VOCAB_SIZE);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    /// token -> id map as JSON, the inspection dump written next to runs.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, TokenId> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as TokenId)).collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn has_exactly_1021_tokens() {
        let v = Vocabulary::build();
        assert_eq!(v.len(), 1021);
    }

    #[test]
    fn fixed_layout_spot_checks() {
        let v = Vocabulary::build();
        assert_eq!(v.token(0), "<eos>");
        assert_eq!(v.token(1), "<|data|>");
        assert_eq!(v.token(2), "<|sep|>");
        assert_eq!(v.token(3), "<|dow0|>");
        assert_eq!(v.token(9), "<|dow6|>");
        assert_eq!(v.token(10), "0");
        assert_eq!(v.token(19), "9");
        assert_eq!(v.token(20), "N");
        assert_eq!(v.token(21), "x000");
        assert_eq!(v.token(520), "x499");
        assert_eq!(v.token(521), "y000");
        assert_eq!(v.token(1020), "y499");
    }

    #[test]
    fn x129_has_id_150() {
        let v = Vocabulary::build();
        assert_eq!(v.id("x129"), Some(150));
        assert_eq!(x_token(129), 150);
    }

    #[test]
    fn id_token_maps_are_inverse() {
        let v = Vocabulary::build();
        for id in 0..VOCAB_SIZE as TokenId {
            assert_eq!(v.id(v.token(id)), Some(id));
        }
    }

    #[test]
    fn json_dump_contains_layout() {
        let v = Vocabulary::build();
        let parsed: std::collections::BTreeMap<String, u32> =
            serde_json::from_str(&v.to_json()).unwrap();
        assert_eq!(parsed.len(), 1021);
        assert_eq!(parsed["y088"], 609);
    }
}
