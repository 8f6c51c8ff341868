//! Preference records and their JSONL form.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, TokenSequence, Vocab};
use crate::scalar::Scalar;

/// A prompt with a chosen and a rejected completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    #[serde(default)]
    pub rating_chosen: Option<i64>,
    #[serde(default)]
    pub rating_rejected: Option<i64>,
}

impl PreferenceRecord {
    pub fn new(prompt: Vec<Token>, chosen: Vec<Token>, rejected: Vec<Token>) -> Self {
        PreferenceRecord {
            prompt,
            chosen,
            rejected,
            rating_chosen: None,
            rating_rejected: None,
        }
    }

    pub fn with_ratings(mut self, chosen: i64, rejected: i64) -> Self {
        self.rating_chosen = Some(chosen);
        self.rating_rejected = Some(rejected);
        self
    }

    pub fn chosen_sequence(&self) -> TokenSequence {
        TokenSequence::new(self.prompt.clone(), self.chosen.clone())
    }

    pub fn rejected_sequence(&self) -> TokenSequence {
        TokenSequence::new(self.prompt.clone(), self.rejected.clone())
    }

    /// Rating difference when both ratings are present, otherwise 0. Equal
    /// ratings also give 0.
    pub fn margin<T: Scalar>(&self) -> T {
        match (self.rating_chosen, self.rating_rejected) {
            (Some(c), Some(r)) => T::lit((c - r) as f64),
            _ => T::zero(),
        }
    }

    /// The same comparison read the other way round.
    pub fn flipped(&self) -> Self {
        PreferenceRecord {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            rating_chosen: self.rating_rejected,
            rating_rejected: self.rating_chosen,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        self.chosen_sequence().validate(vocab)?;
        self.rejected_sequence().validate(vocab)
    }
}

pub fn read_jsonl<D: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<D>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(mut writer: impl Write, records: &[S]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::invalid(e.to_string()))?;
    }
    Ok(())
}
