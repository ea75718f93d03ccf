use std::ops::Deref;

use serde::{Deserialize, Serialize};
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

/// Ordered, normalized, non-empty word tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Wraps already-normalized tokens (e.g. lemmas supplied by the caller).
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::Usage("tokens must be non-empty and contain no whitespace".into()));
        }
        Ok(Self(tokens))
    }

    /// Splits on single spaces without further normalization; handy in tests.
    pub fn words(text: &str) -> Self {
        Self(text.split_whitespace().map(str::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }
}

impl Deref for TokenSequence {
    type Target = [String];
    fn deref(&self) -> &[String] {
        &self.0
    }
}

/// Lowercases, replaces punctuation with spaces, and splits on whitespace.
pub fn tokenize(text: &str, config: &TokenizeConfig) -> TokenSequence {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if config.strip_punctuation && ch.general_category_group() == GeneralCategoryGroup::Punctuation {
            cleaned.push(' ');
        } else if config.lowercase {
            cleaned.extend(ch.to_lowercase());
        } else {
            cleaned.push(ch);
        }
    }
    TokenSequence(cleaned.split_whitespace().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<String> {
        tokenize(text, &TokenizeConfig::default()).0
    }

    #[test]
    fn examples() {
        assert_eq!(toks("The cat."), vec!["the", "cat"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("A  a"), vec!["a", "a"]);
        assert_eq!(toks("«Привет», мир!"), vec!["привет", "мир"]);
    }

    #[test]
    fn config_switches() {
        let cfg = TokenizeConfig {
            lowercase: false,
            strip_punctuation: false,
        };
        assert_eq!(tokenize("The cat.", &cfg).0, vec!["The", "cat."]);
    }

    #[test]
    fn rejects_empty_tokens() {
        assert!(TokenSequence::new(["a", ""]).is_err());
        assert!(TokenSequence::new(["a b"]).is_err());
    }
}
