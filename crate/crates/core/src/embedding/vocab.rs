use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::palette::{Background, ShapeKind, SubjectColor};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const NULL: &str = "<null>";

const TEMPLATE_WORDS: [&str; 10] = ["a", "an", "and", "on", "with", "wearing", "in", "the", "background", "of"];

/// Dense token table; `<pad>` is always id 0 and `<null>` id 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD) || tokens.get(1).map(String::as_str) != Some(NULL) {
            return Err(Error::Vocab("vocabulary must start with <pad>, <null>".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Words of the synthetic world: template words, backgrounds, colors, shapes.
    pub fn toy() -> Self {
        let mut tokens: Vec<String> = vec![PAD.into(), NULL.into()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        tokens.extend(Background::ALL.iter().map(|b| b.name().to_string()));
        tokens.extend(SubjectColor::ALL.iter().map(|c| c.name().to_string()));
        tokens.extend(ShapeKind::ALL.iter().map(|s| s.name().to_string()));
        Vocab::from_tokens(tokens).expect("toy vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn null(&self) -> TokenId {
        1
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index.get(word).copied().ok_or_else(|| Error::Vocab(format!("unknown token {word:?}")))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))
    }

    pub fn shape_id(&self, shape: ShapeKind) -> TokenId {
        self.index[shape.name()]
    }

    /// Lower-cased whitespace tokenization; commas and periods are dropped.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        words(text).map(|w| self.id(&w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words: Result<Vec<&str>> =
            ids.iter().filter(|&&i| i != self.pad()).map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(bad) => Err(Error::Vocab(format!("token id {bad} out of range for {} tokens", self.len()))),
            None => Ok(()),
        }
    }
}

/// Lower-cased words of a prompt with commas and periods stripped.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c == ',' || c == '.').to_lowercase())
        .filter(|w| !w.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_null_present_and_dense() {
        let v = Vocab::toy();
        assert_eq!(v.token(v.pad()).unwrap(), PAD);
        assert_eq!(v.token(v.null()).unwrap(), NULL);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn encodes_captions_with_punctuation() {
        let v = Vocab::toy();
        let ids = v.encode("a red circle, a blue star, and a green square on a gray background").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "a red circle a blue star and a green square on a gray background");
    }

    #[test]
    fn unknown_word_is_vocab_error() {
        assert!(matches!(Vocab::toy().encode("a dog"), Err(Error::Vocab(_))));
    }
}
