use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const DIAGNOSIS_TAG: &str = "diagnosis:";
pub const LOCATION_TAG: &str = "location:";

/// Shape classes in class-id order. A split with `k` classes uses the first `k`.
pub const CLASS_NAMES: [&str; 8] = ["square", "cross", "stripe", "ring", "column", "corner", "tee", "checker"];

pub const ANSWER_WORDS: [&str; 6] = ["upper", "lower", "left", "right", "yes", "no"];

/// Ordered list of vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab_size) {
            Some(&index) => Err(Error::TokenOutOfRange { index, size: vocab_size }),
            None => Ok(()),
        }
    }
}

/// Output symbol table: structural tokens, answer tags, class labels,
/// coordinates `0..=grid_max` and answer words, in that fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    grid_max: usize,
}

impl Vocabulary {
    pub fn new(grid_max: usize) -> Self {
        let mut symbols: Vec<String> = [BOS, EOS, SEP, DIAGNOSIS_TAG, LOCATION_TAG].iter().map(|s| s.to_string()).collect();
        symbols.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        symbols.extend((0..=grid_max).map(|v| v.to_string()));
        symbols.extend(ANSWER_WORDS.iter().map(|s| s.to_string()));
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { symbols, index, grid_max }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn grid_max(&self) -> usize {
        self.grid_max
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn class_token(&self, class: usize) -> usize {
        5 + class
    }

    /// Class id for a class-label token, if it is one.
    pub fn class_of_token(&self, token: usize) -> Option<usize> {
        (5..5 + CLASS_NAMES.len()).contains(&token).then(|| token - 5)
    }

    pub fn coord_token(&self, value: usize) -> Option<usize> {
        (value <= self.grid_max).then(|| 5 + CLASS_NAMES.len() + value)
    }

    /// Encodes whitespace-separated symbols and appends the end token.
    pub fn encode_response(&self, text: &str) -> Result<TokenSequence> {
        let mut out = text
            .split_whitespace()
            .map(|w| self.index_of(w).ok_or_else(|| Error::UnknownToken { token: w.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        out.push(self.eos());
        Ok(TokenSequence(out))
    }

    /// Joins symbols with single spaces, dropping structural tokens.
    pub fn decode(&self, tokens: &TokenSequence) -> String {
        tokens.0.iter().filter(|&&t| t > 2).filter_map(|&t| self.symbol(t)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijective_and_stable() {
        let v = Vocabulary::new(16);
        assert_eq!(v.len(), 5 + 8 + 17 + 6);
        for i in 0..v.len() {
            assert_eq!(v.index_of(v.symbol(i).unwrap()), Some(i));
        }
        assert_eq!(v, Vocabulary::new(16));
        assert_eq!(v.symbol(v.coord_token(16).unwrap()), Some("16"));
        assert_eq!(v.coord_token(17), None);
        assert_eq!(v.class_of_token(v.class_token(2)), Some(2));
        assert_eq!(v.class_of_token(v.eos()), None);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::new(16);
        let seq = v.encode_response("location: 2 3 4 4").unwrap();
        assert_eq!(seq.len(), 6);
        assert_eq!(*seq.0.last().unwrap(), v.eos());
        assert_eq!(v.decode(&seq), "location: 2 3 4 4");
        assert!(matches!(
            v.encode_response("diagnosis: melanoma"),
            Err(Error::UnknownToken { token }) if token == "melanoma"
        ));
    }

    #[test]
    fn out_of_range_tokens() {
        let seq = TokenSequence(vec![0, 40]);
        assert!(seq.validate(36).is_err());
        assert!(seq.validate(41).is_ok());
    }
}
