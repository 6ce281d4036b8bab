//! The example record shared by every pipeline stage, plus JSON-Lines
//! dataset I/O.
//!
//! Sentences are stored as lowercase whitespace tokens. On disk each example
//! is one JSON object per line with the fields `sentence1`, `sentence2`,
//! `gold_label`, `w_p`, `w_h`, `negated`, `lexrel`, `pair_id`, `template_id`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::LexicalRelation;

/// Two-way NLI label. Contradiction never occurs in this data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
}

impl Label {
    pub fn flip(self) -> Self {
        match self {
            Label::Entailment => Label::Neutral,
            Label::Neutral => Label::Entailment,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
        }
    }

    /// Index used by the classifier head (entailment = 0, neutral = 1).
    pub fn index(self) -> usize {
        match self {
            Label::Entailment => 0,
            Label::Neutral => 1,
        }
    }

    pub fn from_index(idx: usize) -> Self {
        if idx == 0 {
            Label::Entailment
        } else {
            Label::Neutral
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One premise/hypothesis pair built by substituting a single word.
///
/// The premise and hypothesis differ at exactly one token position, holding
/// `w_p` and `w_h` respectively. `lexrel` is the relation of `w_p` to `w_h`
/// and is never `None` in a valid example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NLIExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: Label,
    pub w_p: String,
    pub w_h: String,
    pub negated: bool,
    pub lexrel: LexicalRelation,
    /// Shared by the two directions of one substitution.
    pub pair_id: String,
    pub template_id: String,
}

impl NLIExample {
    pub fn premise_text(&self) -> String {
        self.premise.join(" ")
    }

    pub fn hypothesis_text(&self) -> String {
        self.hypothesis.join(" ")
    }

    /// The hyponym of the substituted pair: the forward-side word.
    pub fn hyponym(&self) -> &str {
        match self.lexrel {
            LexicalRelation::Reverse => &self.w_h,
            _ => &self.w_p,
        }
    }
}

/// Lowercase whitespace tokenization, the convention used everywhere in this
/// crate.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// On-disk record. `lexrel`, `pair_id` and `template_id` are optional on
/// ingest so that externally produced files need only the annotation fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub sentence1: String,
    pub sentence2: String,
    pub gold_label: Label,
    pub w_p: String,
    pub w_h: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexrel: Option<LexicalRelation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl From<&NLIExample> for ExampleRecord {
    fn from(ex: &NLIExample) -> Self {
        ExampleRecord {
            sentence1: ex.premise_text(),
            sentence2: ex.hypothesis_text(),
            gold_label: ex.label,
            w_p: ex.w_p.clone(),
            w_h: ex.w_h.clone(),
            negated: Some(ex.negated),
            lexrel: Some(ex.lexrel),
            pair_id: Some(ex.pair_id.clone()),
            template_id: Some(ex.template_id.clone()),
        }
    }
}

/// Writes a dataset as JSON-Lines.
pub fn write_jsonl(path: impl AsRef<Path>, examples: &[NLIExample]) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    for ex in examples {
        let record = ExampleRecord::from(ex);
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads raw records from a JSON-Lines file, keeping line numbers for error
/// reporting.
pub fn read_jsonl_records(path: impl AsRef<Path>) -> Result<Vec<(usize, ExampleRecord)>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        records.push((line_no, record));
    }
    Ok(records)
}
