//! Hyponymy lexicon: directed hyponym→hypernym edges with a precomputed
//! transitive closure, answering lexical-relation queries between words.
//!
//! The file format is one edge per line, hyponym first:
//!
//! ```text
//! # comment lines start with '#'
//! flowers plants
//! roses flowers noun
//! ```
//!
//! An optional third column tags both words with a category (used to match
//! tagged template slots). Words are single whitespace-free tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Relation between two words: `Forward` when the first is a hyponym of the
/// second (⊏), `Reverse` for the converse (⊐), `None` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexicalRelation {
    Forward,
    Reverse,
    None,
}

impl LexicalRelation {
    /// Swaps `Forward` and `Reverse`; `None` is a fixed point.
    pub fn reverse(self) -> Self {
        match self {
            LexicalRelation::Forward => LexicalRelation::Reverse,
            LexicalRelation::Reverse => LexicalRelation::Forward,
            LexicalRelation::None => LexicalRelation::None,
        }
    }
}

impl fmt::Display for LexicalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LexicalRelation::Forward => write!(f, "forward"),
            LexicalRelation::Reverse => write!(f, "reverse"),
            LexicalRelation::None => write!(f, "none"),
        }
    }
}

/// One directed edge of the lexicon, as parsed from a lexicon file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub hyponym: String,
    pub hypernym: String,
    pub category: Option<String>,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read lexicon file: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("lexicon contains a cycle through word {word:?}")]
    Cycle { word: String },
}

/// A validated hyponymy lexicon with transitive closure.
///
/// Immutable after construction; queries never fail (unknown words simply
/// yield `LexicalRelation::None` or empty results).
#[derive(Debug, Clone)]
pub struct Lexicon {
    edges: BTreeSet<(String, String)>,
    /// Forward reachability: word → every hypernym reachable through one or
    /// more edges.
    closure: BTreeMap<String, BTreeSet<String>>,
    vocabulary: BTreeSet<String>,
    categories: HashMap<String, String>,
}

impl Lexicon {
    /// Loads a lexicon from a file; see the module docs for the format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses lexicon text. Duplicate edges are tolerated and deduplicated;
    /// malformed lines and cyclic edge sets are rejected.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            let entry = match fields.as_slice() {
                [hypo, hyper] => LexiconEntry {
                    hyponym: (*hypo).to_string(),
                    hypernym: (*hyper).to_string(),
                    category: None,
                },
                [hypo, hyper, cat] => LexiconEntry {
                    hyponym: (*hypo).to_string(),
                    hypernym: (*hyper).to_string(),
                    category: Some((*cat).to_string()),
                },
                _ => {
                    return Err(LexiconError::Parse {
                        line,
                        message: format!(
                            "expected `hyponym hypernym [category]`, got {} field(s)",
                            fields.len()
                        ),
                    });
                }
            };
            if entry.hyponym == entry.hypernym {
                return Err(LexiconError::Parse {
                    line,
                    message: format!("self-edge on word {:?}", entry.hyponym),
                });
            }
            entries.push((line, entry));
        }
        Self::build(entries)
    }

    /// Builds a lexicon directly from `(hyponym, hypernym)` pairs.
    pub fn from_edges<I, S>(pairs: I) -> Result<Self, LexiconError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let entries = pairs
            .into_iter()
            .map(|(a, b)| {
                (
                    0usize,
                    LexiconEntry {
                        hyponym: a.into(),
                        hypernym: b.into(),
                        category: None,
                    },
                )
            })
            .collect();
        Self::build(entries)
    }

    fn build(entries: Vec<(usize, LexiconEntry)>) -> Result<Self, LexiconError> {
        let mut edges = BTreeSet::new();
        let mut vocabulary = BTreeSet::new();
        let mut categories: HashMap<String, String> = HashMap::new();
        for (line, entry) in entries {
            if let Some(cat) = &entry.category {
                for word in [&entry.hyponym, &entry.hypernym] {
                    match categories.get(word) {
                        Some(existing) if existing != cat => {
                            return Err(LexiconError::Parse {
                                line,
                                message: format!(
                                    "word {word:?} tagged {cat:?} but previously {existing:?}"
                                ),
                            });
                        }
                        _ => {
                            categories.insert(word.clone(), cat.clone());
                        }
                    }
                }
            }
            vocabulary.insert(entry.hyponym.clone());
            vocabulary.insert(entry.hypernym.clone());
            edges.insert((entry.hyponym, entry.hypernym));
        }

        let closure = compute_closure(&edges, &vocabulary)?;
        Ok(Lexicon {
            edges,
            closure,
            vocabulary,
            categories,
        })
    }

    /// Relation of `w1` to `w2`: `Forward` iff `w1` reaches `w2` in the
    /// closure, `Reverse` for the converse, `None` otherwise (including
    /// `w1 == w2` and unknown words).
    pub fn lex_rel(&self, w1: &str, w2: &str) -> LexicalRelation {
        if self.reaches(w1, w2) {
            LexicalRelation::Forward
        } else if self.reaches(w2, w1) {
            LexicalRelation::Reverse
        } else {
            LexicalRelation::None
        }
    }

    fn reaches(&self, from: &str, to: &str) -> bool {
        self.closure.get(from).is_some_and(|set| set.contains(to))
    }

    /// All words related to `w`, each tagged with `lex_rel(w, word)`, in
    /// lexicographic order. Unknown words yield an empty list.
    pub fn related_words(&self, w: &str) -> Vec<(String, LexicalRelation)> {
        let mut out: Vec<(String, LexicalRelation)> = Vec::new();
        for word in &self.vocabulary {
            if word == w {
                continue;
            }
            let rel = self.lex_rel(w, word);
            if rel != LexicalRelation::None {
                out.push((word.clone(), rel));
            }
        }
        out
    }

    /// Every `(hyponym, hypernym)` pair of the transitive closure, in
    /// lexicographic order.
    pub fn closure_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        for (word, ups) in &self.closure {
            for up in ups {
                pairs.push((word.clone(), up.clone()));
            }
        }
        pairs.sort();
        pairs
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocabulary.iter().map(String::as_str)
    }

    pub fn contains_word(&self, w: &str) -> bool {
        self.vocabulary.contains(w)
    }

    pub fn category(&self, w: &str) -> Option<&str> {
        self.categories.get(w).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Transitive closure by DFS from each word, rejecting cycles.
fn compute_closure(
    edges: &BTreeSet<(String, String)>,
    vocabulary: &BTreeSet<String>,
) -> Result<BTreeMap<String, BTreeSet<String>>, LexiconError> {
    let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in edges {
        adjacency.entry(a.as_str()).or_default().push(b.as_str());
    }

    // Iterative DFS with an on-stack set so a cycle can name a word on it.
    let mut closure: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut done: BTreeSet<&str> = BTreeSet::new();
    for start in vocabulary {
        if done.contains(start.as_str()) {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start.as_str(), 0)];
        let mut on_stack: BTreeSet<&str> = BTreeSet::new();
        on_stack.insert(start.as_str());
        while let Some((word, next_child)) = stack.pop() {
            let children = adjacency.get(word).map(Vec::as_slice).unwrap_or(&[]);
            if next_child < children.len() {
                let child = children[next_child];
                stack.push((word, next_child + 1));
                if on_stack.contains(child) {
                    return Err(LexiconError::Cycle {
                        word: child.to_string(),
                    });
                }
                if !done.contains(child) {
                    on_stack.insert(child);
                    stack.push((child, 0));
                }
            } else {
                // All children finished: fold their reach sets into ours.
                let mut reach = BTreeSet::new();
                for child in children {
                    reach.insert((*child).to_string());
                    if let Some(sub) = closure.get(*child) {
                        reach.extend(sub.iter().cloned());
                    }
                }
                if reach.contains(word) {
                    return Err(LexiconError::Cycle {
                        word: word.to_string(),
                    });
                }
                closure.insert(word.to_string(), reach);
                on_stack.remove(word);
                done.insert(word);
            }
        }
    }
    closure.retain(|_, set| !set.is_empty());
    Ok(closure)
}
