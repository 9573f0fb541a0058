//! Character inventory and text normalization.

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Symbols after the two reserved ids, in id order.
const SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz.,?!'-";

pub fn vocab_size() -> usize {
    2 + SYMBOLS.chars().count()
}

pub fn char_to_id(c: char) -> usize {
    SYMBOLS
        .chars()
        .position(|s| s == c)
        .map_or(UNK_ID, |p| p + 2)
}

/// Inverse of [`char_to_id`]; reserved ids render as `None`.
pub fn id_to_char(id: usize) -> Option<char> {
    id.checked_sub(2).and_then(|i| SYMBOLS.chars().nth(i))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharSequence {
    pub ids: Vec<usize>,
    pub original_text: String,
}

impl CharSequence {
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size()) {
            return Err(Error::Invalid(format!(
                "character id {bad} outside vocabulary of {}",
                vocab_size()
            )));
        }
        let original_text = ids.iter().map(|&i| id_to_char(i).unwrap_or('_')).collect();
        Ok(Self { ids, original_text })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rendering of the ids, with `_` for reserved ids.
    pub fn normalized(&self) -> String {
        self.ids
            .iter()
            .map(|&i| id_to_char(i).unwrap_or('_'))
            .collect()
    }
}

/// Lowercases, collapses whitespace runs to one space, trims, and maps
/// characters outside the inventory to the unknown id. Digits are rejected.
pub fn normalize_text(raw: &str) -> Result<CharSequence> {
    if raw.chars().any(|c| c.is_numeric()) {
        return Err(Error::UnnormalizedText);
    }
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let lower = collapsed.to_lowercase();
    if lower.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(CharSequence {
        ids: lower.chars().map(char_to_id).collect(),
        original_text: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory() {
        assert_eq!(vocab_size(), 35);
        assert_eq!(char_to_id(' '), 2);
        assert_eq!(char_to_id('a'), 3);
        assert_eq!(char_to_id('-'), 34);
        assert_eq!(char_to_id('é'), UNK_ID);
        for id in 2..vocab_size() {
            assert_eq!(char_to_id(id_to_char(id).unwrap()), id);
        }
    }

    #[test]
    fn hello_world() {
        let s = normalize_text("Hello, world.").unwrap();
        assert_eq!(s.normalized(), "hello, world.");
        assert_eq!(s.original_text, "Hello, world.");
    }

    #[test]
    fn digits_are_rejected() {
        let err = normalize_text("16").unwrap_err();
        assert_eq!(
            err.to_string(),
            "unnormalized text: digits must be spelled out"
        );
        assert!(err.is_validation());
    }

    #[test]
    fn whitespace_collapses() {
        assert_eq!(
            normalize_text("a  b").unwrap(),
            normalize_text("a b").unwrap().with_text("a  b")
        );
        assert_eq!(normalize_text("  a\t\nb ").unwrap().normalized(), "a b");
        assert!(normalize_text("   ").is_err());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        assert_eq!(normalize_text("a;b").unwrap().ids, vec![3, UNK_ID, 4]);
    }

    impl CharSequence {
        fn with_text(mut self, t: &str) -> Self {
            self.original_text = t.into();
            self
        }
    }
}
