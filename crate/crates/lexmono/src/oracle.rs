//! The reference algorithm the classifier is tested against.
//!
//! Given an example, the algorithm reads the lexical relation between the
//! substituted words into a single intermediate variable, reverses it when
//! negation is present, and returns the result as the sentence-level
//! relation. Because the algorithm is a causal model over that one variable,
//! it also predicts the counterfactual outcome of swapping the variable's
//! value between two examples — the ground truth for interchange
//! interventions.

use thiserror::Error;

use crate::data::{Label, NLIExample};
use crate::lexicon::LexicalRelation;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("example has no lexical relation between its substituted words")]
    MissingLexicalRelation,
}

/// The algorithm's full run trace: its sole intermediate variable, the
/// negation test, and the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleState {
    pub lexrel: LexicalRelation,
    pub negated: bool,
    pub output: LexicalRelation,
}

/// Negation test. Generated examples know their negation scope by
/// construction, so this reads the flag; ingestion sets the flag by token
/// scan when it is absent from the source record.
pub fn contains_not(example: &NLIExample) -> bool {
    example.negated
}

/// Token-scan fallback used when ingesting external data without a negation
/// annotation: negation counts only when "not" occurs in both sentences.
pub fn scan_for_not(premise: &[String], hypothesis: &[String]) -> bool {
    premise.iter().any(|t| t == "not") && hypothesis.iter().any(|t| t == "not")
}

/// Runs the algorithm, returning the full state.
pub fn infer_state(example: &NLIExample) -> Result<OracleState, OracleError> {
    let lexrel = example.lexrel;
    if lexrel == LexicalRelation::None {
        return Err(OracleError::MissingLexicalRelation);
    }
    let negated = contains_not(example);
    let output = if negated { lexrel.reverse() } else { lexrel };
    Ok(OracleState {
        lexrel,
        negated,
        output,
    })
}

/// Sentence-level relation for one example.
pub fn infer(example: &NLIExample) -> Result<LexicalRelation, OracleError> {
    infer_state(example).map(|s| s.output)
}

/// Maps a sentence-level relation to a dataset label.
pub fn relation_to_label(rel: LexicalRelation) -> Result<Label, OracleError> {
    match rel {
        LexicalRelation::Forward => Ok(Label::Entailment),
        LexicalRelation::Reverse => Ok(Label::Neutral),
        LexicalRelation::None => Err(OracleError::MissingLexicalRelation),
    }
}

/// Counterfactual output when the intermediate variable computed on `i` is
/// overwritten with its value on `j`. The recipient `i` supplies the
/// negation context; the donor `j` supplies only the variable's value.
pub fn interv_oracle(i: &NLIExample, j: &NLIExample) -> Result<LexicalRelation, OracleError> {
    let base = infer(i)?;
    if j.lexrel == LexicalRelation::None {
        return Err(OracleError::MissingLexicalRelation);
    }
    if i.lexrel == j.lexrel {
        Ok(base)
    } else {
        Ok(base.reverse())
    }
}

/// Label-valued convenience for `interv_oracle`, the form the intervention
/// sweep compares model outputs against.
pub fn interv_oracle_label(i: &NLIExample, j: &NLIExample) -> Result<Label, OracleError> {
    relation_to_label(interv_oracle(i, j)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn example(lexrel: LexicalRelation, negated: bool) -> NLIExample {
        // Token content is irrelevant to the oracle beyond the stored flags.
        NLIExample {
            premise: tokenize("the children are holding plants"),
            hypothesis: tokenize("the children are holding flowers"),
            label: Label::Entailment,
            w_p: "plants".into(),
            w_h: "flowers".into(),
            negated,
            lexrel,
            pair_id: "p".into(),
            template_id: "t".into(),
        }
    }

    /// Re-runs the algorithm from its definition with the intermediate
    /// variable forcibly overwritten: output = reverse(v) if negated else v.
    fn brute_force_overwritten(value: LexicalRelation, negated: bool) -> LexicalRelation {
        if negated {
            value.reverse()
        } else {
            value
        }
    }

    #[test]
    fn negated_reverse_infers_forward() {
        // Premise "…not…plants" entails hypothesis "…not…flowers".
        let ex = example(LexicalRelation::Reverse, true);
        assert_eq!(infer(&ex).unwrap(), LexicalRelation::Forward);
        assert_eq!(
            relation_to_label(infer(&ex).unwrap()).unwrap(),
            Label::Entailment
        );
    }

    #[test]
    fn positive_context_is_the_identity_branch() {
        for lexrel in [LexicalRelation::Forward, LexicalRelation::Reverse] {
            let ex = example(lexrel, false);
            assert_eq!(infer(&ex).unwrap(), lexrel);
        }
    }

    #[test]
    fn infer_rejects_missing_relation() {
        let ex = example(LexicalRelation::None, false);
        assert_eq!(infer(&ex), Err(OracleError::MissingLexicalRelation));
    }

    #[test]
    fn relation_to_label_convention() {
        assert_eq!(
            relation_to_label(LexicalRelation::Forward).unwrap(),
            Label::Entailment
        );
        assert_eq!(
            relation_to_label(LexicalRelation::Reverse).unwrap(),
            Label::Neutral
        );
        assert!(relation_to_label(LexicalRelation::None).is_err());
    }

    #[test]
    fn example_pair_labels_compose() {
        // The two directions of a negated substitution get opposite labels.
        let a = example(LexicalRelation::Reverse, true);
        let b = example(LexicalRelation::Forward, true);
        assert_eq!(
            relation_to_label(infer(&a).unwrap()).unwrap(),
            Label::Entailment
        );
        assert_eq!(
            relation_to_label(infer(&b).unwrap()).unwrap(),
            Label::Neutral
        );
    }

    #[test]
    fn interchange_truth_table_matches_brute_force() {
        // All 8 (lexrel_i, lexrel_j, negated_i) combinations against an
        // independent evaluation with the variable forcibly overwritten.
        let rels = [LexicalRelation::Forward, LexicalRelation::Reverse];
        for (li, lj, neg) in rels
            .iter()
            .flat_map(|a| rels.iter().map(move |b| (a, b)))
            .flat_map(|(a, b)| [false, true].map(|n| (*a, *b, n)))
        {
            let i = example(li, neg);
            // Donor negation must not matter; give it the opposite context.
            let j = example(lj, !neg);
            let expected = brute_force_overwritten(lj, neg);
            assert_eq!(
                interv_oracle(&i, &j).unwrap(),
                expected,
                "case lexrel_i={li:?} lexrel_j={lj:?} negated_i={neg}"
            );
        }
    }

    #[test]
    fn fig_style_cross_polarity_interchange_flips() {
        // Recipient: negated, reverse relation (entailment). Donor: positive,
        // forward relation. The counterfactual output flips to neutral.
        let i = example(LexicalRelation::Reverse, true);
        let j = example(LexicalRelation::Forward, false);
        assert_eq!(infer(&i).unwrap(), LexicalRelation::Forward);
        assert_eq!(interv_oracle(&i, &j).unwrap(), LexicalRelation::Reverse);
        assert_eq!(interv_oracle_label(&i, &j).unwrap(), Label::Neutral);
    }

    #[test]
    fn self_interchange_is_identity() {
        for lexrel in [LexicalRelation::Forward, LexicalRelation::Reverse] {
            for negated in [false, true] {
                let i = example(lexrel, negated);
                assert_eq!(interv_oracle(&i, &i).unwrap(), infer(&i).unwrap());
            }
        }
    }

    #[test]
    fn interchange_changes_output_iff_relations_differ() {
        let rels = [LexicalRelation::Forward, LexicalRelation::Reverse];
        for li in rels {
            for lj in rels {
                for neg in [false, true] {
                    let i = example(li, neg);
                    let j = example(lj, false);
                    let changed = interv_oracle(&i, &j).unwrap() != infer(&i).unwrap();
                    assert_eq!(changed, li != lj);
                }
            }
        }
    }

    #[test]
    fn infer_ignores_sentence_material() {
        let mut a = example(LexicalRelation::Forward, true);
        let mut b = example(LexicalRelation::Forward, true);
        b.premise = tokenize("a dog is not chasing pugs");
        b.hypothesis = tokenize("a dog is not chasing dogs");
        b.template_id = "other".into();
        a.pair_id = "x".into();
        assert_eq!(infer(&a).unwrap(), infer(&b).unwrap());
    }

    #[test]
    fn token_scan_requires_not_in_both_sentences() {
        let with = tokenize("the children are not holding plants");
        let without = tokenize("the children are holding plants");
        assert!(scan_for_not(&with, &with));
        assert!(!scan_for_not(&with, &without));
        assert!(!scan_for_not(&without, &without));
    }
}
