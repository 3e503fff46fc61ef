//! Fixed-size token vocabulary for the keydown head.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::AgentError;
use crate::env::MAX_TYPED_TOKENS;
use crate::text::tokenize;

/// Number of vocabulary entries, PAD included.
pub const VOCAB_SIZE: usize = 1591;
/// Index of the padding token.
pub const PAD: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from token frequencies over `texts`: PAD, then the 1,590 most
    /// frequent tokens (ties broken alphabetically), then `reservedN`
    /// fillers if there are fewer distinct tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().take(VOCAB_SIZE - 1).map(|(t, _)| t));
        let mut n = 0;
        while tokens.len() < VOCAB_SIZE {
            let filler = format!("reserved{n}");
            if !tokens.contains(&filler) {
                tokens.push(filler);
            }
            n += 1;
        }
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, AgentError> {
        if tokens.len() != VOCAB_SIZE {
            return Err(AgentError::Format(format!(
                "vocabulary has {} entries, expected {VOCAB_SIZE}",
                tokens.len()
            )));
        }
        if tokens[PAD] != PAD_TOKEN {
            return Err(AgentError::Format(format!("entry 0 must be {PAD_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(VOCAB_SIZE);
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(AgentError::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token indices of `text`, PAD-padded to the slot count.
    pub fn encode_text(&self, text: &str) -> Result<[usize; MAX_TYPED_TOKENS], AgentError> {
        let toks = tokenize(text);
        if toks.len() > MAX_TYPED_TOKENS {
            return Err(AgentError::TooManyTokens(toks.len()));
        }
        let mut slots = [PAD; MAX_TYPED_TOKENS];
        for (slot, tok) in slots.iter_mut().zip(&toks) {
            *slot = self.lookup(tok).ok_or_else(|| AgentError::UnknownToken(tok.clone()))?;
        }
        Ok(slots)
    }

    /// Tokens up to the first PAD, joined by single spaces.
    pub fn decode(&self, slots: &[usize]) -> String {
        slots
            .iter()
            .take_while(|&&i| i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self, AgentError> {
        let tokens = r.lines().collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(tokens)
    }
}
