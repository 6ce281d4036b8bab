//! Template-based dataset generation, train/test splitting, and the
//! external-corpus ingestion adapter.
//!
//! For every template and every transitive hyponym/hypernym pair the
//! generator emits the two substitution directions under one `pair_id`, with
//! labels assigned by the reference algorithm, so the output is perfectly
//! balanced between the two labels by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{tokenize, DataError, NLIExample};
use crate::lexicon::{LexicalRelation, Lexicon};
use crate::oracle;

/// Default lexicon fixture bundled with the crate.
pub const DEFAULT_LEXICON: &str = include_str!("../fixtures/lexicon.txt");
/// Default template fixture bundled with the crate.
pub const DEFAULT_TEMPLATES: &str = include_str!("../fixtures/templates.txt");

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("template parse error at line {line}: {message}")]
    TemplateParse { line: usize, message: String },
    #[error("no templates provided")]
    EmptyTemplates,
    #[error("lexicon has no edges")]
    EmptyLexicon,
    #[error(
        "word {word:?} does not fit slot tagged {expected:?} in template {template_id:?} \
         (word category: {found:?})"
    )]
    SlotMismatch {
        template_id: String,
        word: String,
        expected: String,
        found: Option<String>,
    },
    #[error("no examples to split")]
    EmptyDataset,
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error(
        "split infeasible: hyponym {hyponym:?} holds {count} of {total} examples, \
         at least the train share for test fraction {fraction}"
    )]
    Infeasible {
        hyponym: String,
        count: usize,
        total: usize,
        fraction: f64,
    },
    #[error("record at line {line}: no lexical relation between {w_p:?} and {w_h:?}")]
    Relation {
        line: usize,
        w_p: String,
        w_h: String,
    },
    #[error("record at line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which context(s) to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negated,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TemplateToken {
    Word(String),
    /// `{}` accepts any word; `{tag}` only words carrying that category.
    Slot(Option<String>),
}

/// One sentence frame with a single substitution slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateForm {
    tokens: Vec<TemplateToken>,
}

impl TemplateForm {
    fn parse(text: &str, line: usize) -> Result<Self, DatagenError> {
        let mut tokens = Vec::new();
        let mut slots = 0;
        for raw in text.split_whitespace() {
            if raw.starts_with('{') && raw.ends_with('}') {
                let tag = &raw[1..raw.len() - 1];
                tokens.push(TemplateToken::Slot(if tag.is_empty() {
                    None
                } else {
                    Some(tag.to_string())
                }));
                slots += 1;
            } else {
                tokens.push(TemplateToken::Word(raw.to_lowercase()));
            }
        }
        if slots != 1 {
            return Err(DatagenError::TemplateParse {
                line,
                message: format!("expected exactly one slot marker, found {slots}"),
            });
        }
        Ok(TemplateForm { tokens })
    }

    fn contains_word(&self, word: &str) -> bool {
        self.tokens
            .iter()
            .any(|t| matches!(t, TemplateToken::Word(w) if w == word))
    }

    pub fn slot_tag(&self) -> Option<&str> {
        self.tokens.iter().find_map(|t| match t {
            TemplateToken::Slot(tag) => tag.as_deref(),
            _ => None,
        })
    }

    /// Instantiates the frame with `word` in the slot.
    pub fn fill(&self, word: &str) -> Vec<String> {
        self.tokens
            .iter()
            .map(|t| match t {
                TemplateToken::Word(w) => w.clone(),
                TemplateToken::Slot(_) => word.to_string(),
            })
            .collect()
    }
}

/// A sentence template in both contexts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub positive: TemplateForm,
    pub negated: TemplateForm,
}

impl Template {
    /// Parses a template file: `id | positive form | negated form` per line,
    /// `#` comments allowed.
    pub fn parse_file(text: &str) -> Result<Vec<Template>, DatagenError> {
        let mut templates = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('|').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(DatagenError::TemplateParse {
                    line,
                    message: format!("expected `id | positive | negated`, got {} field(s)", fields.len()),
                });
            }
            let template = Template {
                id: fields[0].to_string(),
                positive: TemplateForm::parse(fields[1], line)?,
                negated: TemplateForm::parse(fields[2], line)?,
            };
            template.validate(line)?;
            templates.push(template);
        }
        templates.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(templates)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<Template>, DatagenError> {
        let text = std::fs::read_to_string(path).map_err(DataError::Io)?;
        Self::parse_file(&text)
    }

    fn validate(&self, line: usize) -> Result<(), DatagenError> {
        if !self.negated.contains_word("not") {
            return Err(DatagenError::TemplateParse {
                line,
                message: format!("negated form of template {:?} lacks the token \"not\"", self.id),
            });
        }
        if self.positive.contains_word("not") {
            return Err(DatagenError::TemplateParse {
                line,
                message: format!("positive form of template {:?} contains \"not\"", self.id),
            });
        }
        Ok(())
    }

    fn form(&self, negated: bool) -> &TemplateForm {
        if negated {
            &self.negated
        } else {
            &self.positive
        }
    }
}

fn check_slot(
    template: &Template,
    form: &TemplateForm,
    word: &str,
    lexicon: &Lexicon,
) -> Result<(), DatagenError> {
    if let Some(tag) = form.slot_tag() {
        let found = lexicon.category(word);
        if found != Some(tag) {
            return Err(DatagenError::SlotMismatch {
                template_id: template.id.clone(),
                word: word.to_string(),
                expected: tag.to_string(),
                found: found.map(str::to_string),
            });
        }
    }
    Ok(())
}

/// Generates the full cross product of templates × closure pairs ×
/// requested polarities, two examples (one per substitution direction) per
/// combination.
pub fn generate(
    templates: &[Template],
    lexicon: &Lexicon,
    polarity: Polarity,
) -> Result<Vec<NLIExample>, DatagenError> {
    if templates.is_empty() {
        return Err(DatagenError::EmptyTemplates);
    }
    if lexicon.is_empty() {
        return Err(DatagenError::EmptyLexicon);
    }
    let negations: &[bool] = match polarity {
        Polarity::Positive => &[false],
        Polarity::Negated => &[true],
        Polarity::Both => &[false, true],
    };
    let pairs = lexicon.closure_pairs();

    let mut templates_sorted: Vec<&Template> = templates.iter().collect();
    templates_sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut out = Vec::with_capacity(2 * templates.len() * pairs.len() * negations.len());
    for template in templates_sorted {
        for (hypo, hyper) in &pairs {
            for &negated in negations {
                let form = template.form(negated);
                check_slot(template, form, hypo, lexicon)?;
                check_slot(template, form, hyper, lexicon)?;
                let pol = if negated { "neg" } else { "pos" };
                let pair_id = format!("{}/{}/{}-{}", template.id, pol, hypo, hyper);
                for (w_p, w_h, lexrel) in [
                    (hypo, hyper, LexicalRelation::Forward),
                    (hyper, hypo, LexicalRelation::Reverse),
                ] {
                    let mut example = NLIExample {
                        premise: form.fill(w_p),
                        hypothesis: form.fill(w_h),
                        label: crate::data::Label::Entailment, // overwritten below
                        w_p: w_p.clone(),
                        w_h: w_h.clone(),
                        negated,
                        lexrel,
                        pair_id: pair_id.clone(),
                        template_id: template.id.clone(),
                    };
                    let output = oracle::infer(&example).expect("generated lexrel is never none");
                    example.label =
                        oracle::relation_to_label(output).expect("oracle output is never none");
                    out.push(example);
                }
            }
        }
    }
    Ok(out)
}

/// Which side of a split a manifest row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Train => write!(f, "train"),
            Side::Test => write!(f, "test"),
        }
    }
}

/// Per-hyponym example counts for each side of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub side: Side,
    pub hyponym: String,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub rows: Vec<ManifestRow>,
}

impl SplitManifest {
    fn from_sides(train: &[NLIExample], test: &[NLIExample]) -> Self {
        let mut rows = Vec::new();
        for (side, examples) in [(Side::Train, train), (Side::Test, test)] {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for ex in examples {
                *counts.entry(ex.hyponym()).or_default() += 1;
            }
            let mut side_rows: Vec<ManifestRow> = counts
                .into_iter()
                .map(|(hyponym, count)| ManifestRow {
                    side,
                    hyponym: hyponym.to_string(),
                    count,
                })
                .collect();
            // Largest families first, the conventional manifest layout.
            side_rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.hyponym.cmp(&b.hyponym)));
            rows.extend(side_rows);
        }
        SplitManifest { rows }
    }

    pub fn side(&self, side: Side) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.side == side)
    }

    pub fn side_total(&self, side: Side) -> usize {
        self.side(side).map(|r| r.count).sum()
    }

    /// Writes the manifest as `side,hyponym,count` CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut out = String::from("side,hyponym,count\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.side, row.hyponym, row.count));
        }
        std::fs::write(path, out).map_err(DataError::Io)?;
        Ok(())
    }
}

/// A train/test partition with its per-hyponym manifest.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<NLIExample>,
    pub test: Vec<NLIExample>,
    pub manifest: SplitManifest,
}

fn check_fraction(test_fraction: f64) -> Result<(), DatagenError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatagenError::BadFraction(test_fraction));
    }
    Ok(())
}

/// Systematic-generalization split: whole hyponym families are assigned to
/// the test side, smallest first (ties shuffled under `seed`), until the
/// test side reaches `test_fraction` of the examples. The hyponym sets of
/// the two sides are disjoint, and both directions of a pair always land on
/// the same side because they share their forward-side word.
pub fn split_systematic(
    examples: &[NLIExample],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatagenError> {
    if examples.is_empty() {
        return Err(DatagenError::EmptyDataset);
    }
    check_fraction(test_fraction)?;

    let mut by_hyponym: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in examples.iter().enumerate() {
        by_hyponym.entry(ex.hyponym()).or_default().push(idx);
    }
    let total = examples.len();
    for (hyponym, idxs) in &by_hyponym {
        if idxs.len() as f64 >= (1.0 - test_fraction) * total as f64 {
            return Err(DatagenError::Infeasible {
                hyponym: hyponym.to_string(),
                count: idxs.len(),
                total,
                fraction: test_fraction,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut families: Vec<(&str, Vec<usize>)> = by_hyponym.into_iter().collect();
    families.shuffle(&mut rng);
    families.sort_by_key(|(_, idxs)| idxs.len()); // stable: ties stay shuffled

    let target = test_fraction * total as f64;
    let mut test_idx: Vec<usize> = Vec::new();
    let mut train_idx: Vec<usize> = Vec::new();
    for (_, idxs) in families {
        if (test_idx.len() as f64) < target {
            test_idx.extend(idxs);
        } else {
            train_idx.extend(idxs);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let train: Vec<NLIExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let test: Vec<NLIExample> = test_idx.iter().map(|&i| examples[i].clone()).collect();
    let manifest = SplitManifest::from_sides(&train, &test);
    Ok(DatasetSplit { train, test, manifest })
}

/// IID split: pairs are kept together and shuffled uniformly under `seed`;
/// no hyponym disjointness is guaranteed.
pub fn split_random(
    examples: &[NLIExample],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatagenError> {
    if examples.is_empty() {
        return Err(DatagenError::EmptyDataset);
    }
    check_fraction(test_fraction)?;

    let mut by_pair: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, ex) in examples.iter().enumerate() {
        by_pair.entry(ex.pair_id.as_str()).or_default().push(idx);
    }
    let mut pairs: Vec<Vec<usize>> = by_pair.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);

    let target = test_fraction * examples.len() as f64;
    let mut test_idx: Vec<usize> = Vec::new();
    let mut train_idx: Vec<usize> = Vec::new();
    for unit in pairs {
        if (test_idx.len() as f64) < target {
            test_idx.extend(unit);
        } else {
            train_idx.extend(unit);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let train: Vec<NLIExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let test: Vec<NLIExample> = test_idx.iter().map(|&i| examples[i].clone()).collect();
    let manifest = SplitManifest::from_sides(&train, &test);
    Ok(DatasetSplit { train, test, manifest })
}

/// A record whose stored label disagrees with the reference algorithm.
/// Such records are quarantined rather than admitted to the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMismatch {
    pub line: usize,
    pub stored: crate::data::Label,
    pub expected: crate::data::Label,
    pub pair_id: String,
}

/// Result of ingesting an external JSON-Lines corpus.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub examples: Vec<NLIExample>,
    pub label_mismatches: Vec<LabelMismatch>,
}

/// Parses an external corpus, recomputing each record's lexical relation
/// from the lexicon and flagging records whose stored label disagrees with
/// the reference algorithm.
pub fn ingest_external(path: impl AsRef<Path>, lexicon: &Lexicon) -> Result<Ingested, DatagenError> {
    let records = crate::data::read_jsonl_records(path)?;
    let mut examples = Vec::with_capacity(records.len());
    let mut label_mismatches = Vec::new();
    for (line, record) in records {
        let premise = tokenize(&record.sentence1);
        let hypothesis = tokenize(&record.sentence2);
        let w_p = record.w_p.to_lowercase();
        let w_h = record.w_h.to_lowercase();

        let lexrel = lexicon.lex_rel(&w_p, &w_h);
        if lexrel == LexicalRelation::None {
            return Err(DatagenError::Relation { line, w_p, w_h });
        }

        let diffs: Vec<usize> = if premise.len() == hypothesis.len() {
            (0..premise.len())
                .filter(|&k| premise[k] != hypothesis[k])
                .collect()
        } else {
            Vec::new()
        };
        match diffs.as_slice() {
            [k] if premise[*k] == w_p && hypothesis[*k] == w_h => {}
            _ => {
                return Err(DatagenError::BadRecord {
                    line,
                    message: format!(
                        "sentences must differ at exactly one token holding {w_p:?}/{w_h:?}"
                    ),
                });
            }
        }

        let negated = record
            .negated
            .unwrap_or_else(|| oracle::scan_for_not(&premise, &hypothesis));
        let example = NLIExample {
            premise,
            hypothesis,
            label: record.gold_label,
            w_p,
            w_h,
            negated,
            lexrel,
            pair_id: record.pair_id.unwrap_or_else(|| format!("ext:{line}")),
            template_id: record.template_id.unwrap_or_else(|| "external".to_string()),
        };

        let expected = oracle::relation_to_label(
            oracle::infer(&example).expect("lexrel checked above"),
        )
        .expect("infer output is never none");
        if expected != example.label {
            label_mismatches.push(LabelMismatch {
                line,
                stored: example.label,
                expected,
                pair_id: example.pair_id.clone(),
            });
        } else {
            examples.push(example);
        }
    }
    Ok(Ingested { examples, label_mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn fixture_lexicon() -> Lexicon {
        Lexicon::parse(DEFAULT_LEXICON).unwrap()
    }

    fn fixture_templates() -> Vec<Template> {
        Template::parse_file(DEFAULT_TEMPLATES).unwrap()
    }

    fn tiny_lexicon() -> Lexicon {
        // 3 edges, 4 closure pairs: flowers⊏plants, roses⊏flowers,
        // roses⊏plants, pugs⊏dogs.
        Lexicon::parse("flowers plants\nroses flowers\npugs dogs\n").unwrap()
    }

    fn two_templates() -> Vec<Template> {
        Template::parse_file(
            "holding | the children are still holding {} | the children are not holding {}\n\
             selling | the man is currently selling {} | the man is not selling {}\n",
        )
        .unwrap()
    }

    #[test]
    fn default_fixtures_parse() {
        let lex = fixture_lexicon();
        let templates = fixture_templates();
        assert!(lex.edge_count() >= 30);
        assert_eq!(templates.len(), 10);
        assert_eq!(lex.lex_rel("flowers", "plants"), LexicalRelation::Forward);
        assert_eq!(lex.lex_rel("pugs", "dogs"), LexicalRelation::Forward);
        assert_eq!(lex.lex_rel("elms", "trees"), LexicalRelation::Forward);
    }

    #[test]
    fn negated_generation_matches_running_example() {
        let lex = Lexicon::parse("flowers plants\n").unwrap();
        let templates = Template::parse_file(
            "holding | the three children are still holding {} | the three children are not holding {}\n",
        )
        .unwrap();
        let examples = generate(&templates, &lex, Polarity::Negated).unwrap();
        assert_eq!(examples.len(), 2);

        let fwd = &examples[0];
        assert_eq!(fwd.premise_text(), "the three children are not holding flowers");
        assert_eq!(fwd.hypothesis_text(), "the three children are not holding plants");
        assert_eq!(fwd.lexrel, LexicalRelation::Forward);
        assert_eq!(fwd.label, Label::Neutral);

        let rev = &examples[1];
        assert_eq!(rev.premise_text(), "the three children are not holding plants");
        assert_eq!(rev.hypothesis_text(), "the three children are not holding flowers");
        assert_eq!(rev.lexrel, LexicalRelation::Reverse);
        assert_eq!(rev.label, Label::Entailment);
        assert_eq!(fwd.pair_id, rev.pair_id);
    }

    #[test]
    fn positive_generation_swaps_labels() {
        let lex = Lexicon::parse("flowers plants\n").unwrap();
        let templates = two_templates();
        let examples = generate(&templates[..1], &lex, Polarity::Positive).unwrap();
        let fwd = examples.iter().find(|e| e.w_p == "flowers").unwrap();
        let rev = examples.iter().find(|e| e.w_p == "plants").unwrap();
        assert_eq!(fwd.label, Label::Entailment);
        assert_eq!(rev.label, Label::Neutral);
        assert!(!fwd.negated);
    }

    #[test]
    fn generation_count_matches_enumeration() {
        // Brute-force enumeration over a 2-template, 3-edge fixture: the
        // closure has 4 pairs, so BOTH polarity yields 4·T·E = 4·2·4 = 32.
        let lex = tiny_lexicon();
        let templates = two_templates();
        let closure_pairs = lex.closure_pairs().len();
        assert_eq!(closure_pairs, 4);
        let examples = generate(&templates, &lex, Polarity::Both).unwrap();
        assert_eq!(examples.len(), 4 * templates.len() * closure_pairs);
        let entailment = examples.iter().filter(|e| e.label == Label::Entailment).count();
        assert_eq!(entailment * 2, examples.len());
    }

    #[test]
    fn generated_examples_satisfy_invariants() {
        let examples = generate(&fixture_templates(), &fixture_lexicon(), Polarity::Both).unwrap();
        assert!(examples.len() >= 2000);
        let mut by_pair: BTreeMap<&str, Vec<&NLIExample>> = BTreeMap::new();
        for ex in &examples {
            // Oracle consistency.
            let output = oracle::infer(ex).unwrap();
            assert_eq!(oracle::relation_to_label(output).unwrap(), ex.label);
            // Single-token difference at the substitution site.
            let diffs: Vec<usize> = (0..ex.premise.len())
                .filter(|&k| ex.premise[k] != ex.hypothesis[k])
                .collect();
            assert_eq!(diffs.len(), 1);
            assert_eq!(ex.premise[diffs[0]], ex.w_p);
            assert_eq!(ex.hypothesis[diffs[0]], ex.w_h);
            // Negation partition.
            let has_not =
                ex.premise.iter().any(|t| t == "not") && ex.hypothesis.iter().any(|t| t == "not");
            assert_eq!(ex.negated, has_not);
            by_pair.entry(&ex.pair_id).or_default().push(ex);
        }
        // Pair duality.
        for (pair_id, members) in by_pair {
            assert_eq!(members.len(), 2, "pair {pair_id} must have two directions");
            let (a, b) = (members[0], members[1]);
            assert_eq!(a.w_p, b.w_h);
            assert_eq!(a.w_h, b.w_p);
            assert_eq!(a.lexrel, b.lexrel.reverse());
            assert_eq!(a.label, b.label.flip());
        }
    }

    #[test]
    fn polarity_filters_negation() {
        let lex = tiny_lexicon();
        let templates = two_templates();
        assert!(generate(&templates, &lex, Polarity::Negated)
            .unwrap()
            .iter()
            .all(|e| e.negated));
        assert!(generate(&templates, &lex, Polarity::Positive)
            .unwrap()
            .iter()
            .all(|e| !e.negated));
    }

    #[test]
    fn tagged_slot_rejects_uncategorized_word() {
        let lex = Lexicon::parse("flowers plants noun\nwaltzes dances verb\n").unwrap();
        let templates =
            Template::parse_file("t | the kids are still doing {verb} | the kids are not doing {verb}\n")
                .unwrap();
        let err = generate(&templates, &lex, Polarity::Both).unwrap_err();
        assert!(matches!(err, DatagenError::SlotMismatch { .. }));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let lex = tiny_lexicon();
        assert!(matches!(
            generate(&[], &lex, Polarity::Both),
            Err(DatagenError::EmptyTemplates)
        ));
        let empty = Lexicon::parse("").unwrap();
        assert!(matches!(
            generate(&two_templates(), &empty, Polarity::Both),
            Err(DatagenError::EmptyLexicon)
        ));
    }

    #[test]
    fn systematic_split_manifest_lists_descending_counts() {
        // Families sized so the three smallest land in test: greedy fills
        // the test side smallest-first until the fraction is reached.
        let lex = Lexicon::parse(
            "pugs dogs\nbeagles dogs\npoodles dogs\nkittens cats\ncats mammals\nrobins birds\n",
        )
        .unwrap();
        let templates = two_templates();
        let examples = generate(&templates, &lex, Polarity::Negated).unwrap();
        let split = split_systematic(&examples, 0.45, 7).unwrap();
        let test_rows: Vec<&ManifestRow> = split.manifest.side(Side::Test).collect();
        // Counts are listed largest first within the side.
        for pair in test_rows.windows(2) {
            assert!(pair[0].count >= pair[1].count);
        }
        assert_eq!(split.manifest.side_total(Side::Test), split.test.len());
        assert_eq!(split.manifest.side_total(Side::Train), split.train.len());
    }

    #[test]
    fn systematic_split_hyponym_sets_are_disjoint() {
        let examples = generate(&fixture_templates(), &fixture_lexicon(), Polarity::Negated).unwrap();
        let split = split_systematic(&examples, 0.25, 3).unwrap();
        let train: BTreeSet<&str> = split.train.iter().map(|e| e.hyponym()).collect();
        let test: BTreeSet<&str> = split.test.iter().map(|e| e.hyponym()).collect();
        assert!(train.intersection(&test).next().is_none());
        assert!(!split.test.is_empty());
        assert!(!split.train.is_empty());
    }

    #[test]
    fn degenerate_fraction_yields_single_family_test_side() {
        let lex = Lexicon::parse("pugs dogs\nkittens cats\nrobins birds\n").unwrap();
        let examples = generate(&two_templates(), &lex, Polarity::Negated).unwrap();
        // 12 examples over three families of 4; one family suffices.
        let split = split_systematic(&examples, 0.1, 1).unwrap();
        let test: BTreeSet<&str> = split.test.iter().map(|e| e.hyponym()).collect();
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn dominant_hyponym_makes_split_infeasible() {
        let lex = Lexicon::parse("pugs dogs\npugs mammals\npugs animals\nrobins birds\n").unwrap();
        let examples = generate(&two_templates(), &lex, Polarity::Negated).unwrap();
        // pugs holds 12 of 16 examples = 75% ≥ 1 − 0.3.
        let err = split_systematic(&examples, 0.3, 0).unwrap_err();
        assert!(matches!(err, DatagenError::Infeasible { .. }));
    }

    #[test]
    fn random_split_is_deterministic_and_partitions() {
        let examples = generate(&two_templates(), &tiny_lexicon(), Polarity::Both).unwrap();
        let a = split_random(&examples, 0.5, 11).unwrap();
        let b = split_random(&examples, 0.5, 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);

        // Multiset partition: train ∪ test = input, train ∩ test = ∅.
        let mut recombined: Vec<String> = a
            .train
            .iter()
            .chain(a.test.iter())
            .map(|e| format!("{}|{}", e.pair_id, e.w_p))
            .collect();
        recombined.sort();
        let mut original: Vec<String> = examples
            .iter()
            .map(|e| format!("{}|{}", e.pair_id, e.w_p))
            .collect();
        original.sort();
        assert_eq!(recombined, original);
    }

    #[test]
    fn random_split_halves_within_one_pair() {
        let examples = generate(&fixture_templates(), &tiny_lexicon(), Polarity::Both).unwrap();
        let n = examples.len();
        let split = split_random(&examples, 0.5, 5).unwrap();
        assert!((split.test.len() as i64 - (n / 2) as i64).unsigned_abs() <= 2);
        // Pairs stay together.
        let test_pairs: BTreeSet<&str> = split.test.iter().map(|e| e.pair_id.as_str()).collect();
        let train_pairs: BTreeSet<&str> = split.train.iter().map(|e| e.pair_id.as_str()).collect();
        assert!(test_pairs.intersection(&train_pairs).next().is_none());
    }

    #[test]
    fn export_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let examples = generate(&two_templates(), &tiny_lexicon(), Polarity::Both).unwrap();
        crate::data::write_jsonl(&path, &examples).unwrap();
        let ingested = ingest_external(&path, &tiny_lexicon()).unwrap();
        assert!(ingested.label_mismatches.is_empty());
        assert_eq!(ingested.examples, examples);
    }

    #[test]
    fn ingest_parses_the_classic_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"sentence1\":\"the three children are not holding plants\",",
                "\"sentence2\":\"the three children are not holding flowers\",",
                "\"gold_label\":\"entailment\",\"w_p\":\"plants\",\"w_h\":\"flowers\"}\n"
            ),
        )
        .unwrap();
        let lex = Lexicon::parse("flowers plants\n").unwrap();
        let ingested = ingest_external(&path, &lex).unwrap();
        assert_eq!(ingested.examples.len(), 1);
        let ex = &ingested.examples[0];
        assert!(ex.negated, "negation must be recovered by token scan");
        assert_eq!(ex.lexrel, LexicalRelation::Reverse);
        assert_eq!(ex.label, Label::Entailment);
    }

    #[test]
    fn ingest_rejects_unknown_words() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"sentence1\":\"a man is still riding zebras\",",
                "\"sentence2\":\"a man is still riding horses\",",
                "\"gold_label\":\"neutral\",\"w_p\":\"zebras\",\"w_h\":\"horses\"}\n"
            ),
        )
        .unwrap();
        let err = ingest_external(&path, &tiny_lexicon()).unwrap_err();
        assert!(matches!(err, DatagenError::Relation { line: 1, .. }));
    }

    #[test]
    fn ingest_quarantines_label_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        // Stored label contradicts the algorithm (positive context,
        // flowers ⊏ plants should be entailment).
        std::fs::write(
            &path,
            concat!(
                "{\"sentence1\":\"the kids are still holding flowers\",",
                "\"sentence2\":\"the kids are still holding plants\",",
                "\"gold_label\":\"neutral\",\"w_p\":\"flowers\",\"w_h\":\"plants\"}\n"
            ),
        )
        .unwrap();
        let ingested = ingest_external(&path, &tiny_lexicon()).unwrap();
        assert!(ingested.examples.is_empty());
        assert_eq!(ingested.label_mismatches.len(), 1);
        assert_eq!(ingested.label_mismatches[0].stored, Label::Neutral);
        assert_eq!(ingested.label_mismatches[0].expected, Label::Entailment);
    }

    #[test]
    fn ingest_reports_malformed_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        std::fs::write(&path, "{\"sentence1\":\"missing fields\"}\n").unwrap();
        let err = ingest_external(&path, &tiny_lexicon()).unwrap_err();
        assert!(matches!(err, DatagenError::Data(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn manifest_csv_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let examples = generate(&two_templates(), &tiny_lexicon(), Polarity::Negated).unwrap();
        let split = split_systematic(&examples, 0.2, 0).unwrap();
        split.manifest.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("side,hyponym,count"));
        assert_eq!(text.lines().count(), split.manifest.rows.len() + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn systematic_split_disjoint_under_fuzz(seed in 0u64..1000, frac in 0.05f64..0.6) {
            // ~500-example corpus: 2 templates × 62 closure pairs × 2
            // directions, negated polarity only.
            let examples = generate(&two_templates(), &fixture_lexicon(), Polarity::Negated).unwrap();
            prop_assume!(examples.len() >= 240);
            let split = match split_systematic(&examples, frac, seed) {
                Ok(s) => s,
                Err(DatagenError::Infeasible { .. }) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            };
            let train: BTreeSet<&str> = split.train.iter().map(|e| e.hyponym()).collect();
            let test: BTreeSet<&str> = split.test.iter().map(|e| e.hyponym()).collect();
            prop_assert!(train.intersection(&test).next().is_none());
            prop_assert_eq!(split.train.len() + split.test.len(), examples.len());
            prop_assert!(split.test.len() as f64 >= frac * examples.len() as f64);
        }
    }
}
