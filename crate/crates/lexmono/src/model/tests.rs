use std::sync::OnceLock;

use super::*;
use crate::datagen::{generate, Polarity, Template};
use crate::lexicon::Lexicon;

fn small_corpus() -> &'static Vec<NLIExample> {
    static CORPUS: OnceLock<Vec<NLIExample>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let lex = Lexicon::parse("flowers plants\nroses flowers\npugs dogs\ncats mammals\n").unwrap();
        let templates = Template::parse_file(
            "holding | the children are still holding {} | the children are not holding {}\n\
             selling | the man is currently selling {} | the man is not selling {}\n",
        )
        .unwrap();
        generate(&templates, &lex, Polarity::Both).unwrap()
    })
}

fn small_config() -> ModelConfig {
    let vocab = Vocab::build(small_corpus().iter());
    ModelConfig {
        rows: 2,
        width: 16,
        heads: 2,
        max_len: 24,
        vocab,
        seed: 7,
    }
}

/// A model trained to memorize the small corpus, shared across tests.
fn trained_fixture() -> &'static (InstrumentedModel, Vec<NLIExample>) {
    static FIXTURE: OnceLock<(InstrumentedModel, Vec<NLIExample>)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = small_corpus().clone();
        let hp = TrainHyperparams {
            epochs: 60,
            learning_rate: 2e-3,
            batch_size: 16,
            seed: 1,
            class_weights: None,
        };
        let (model, report) = train(&small_config(), &corpus, &hp).unwrap();
        assert!(
            report.final_train_accuracy >= 0.99,
            "fixture failed to fit: {}",
            report.final_train_accuracy
        );
        (model, corpus)
    })
}

/// The trained fixture, reusable by other in-crate test modules.
pub(crate) fn shared_trained_fixture() -> (&'static InstrumentedModel, &'static [NLIExample]) {
    let (model, corpus) = trained_fixture();
    (model, corpus.as_slice())
}

fn example_by(corpus: &[NLIExample], negated: bool, entailment: bool) -> &NLIExample {
    corpus
        .iter()
        .find(|e| {
            e.negated == negated && (e.label == Label::Entailment) == entailment
        })
        .unwrap()
}

#[test]
fn encode_produces_standard_layout() {
    let config = small_config();
    let ex = example_by(small_corpus(), true, true);
    let enc = encode(ex, &config).unwrap();
    assert_eq!(enc.cls_pos, 0);
    assert_eq!(enc.tokens[0], config.vocab.id(CLS_TOKEN));
    let sep = config.vocab.id(SEP_TOKEN);
    assert_eq!(enc.tokens[1 + ex.premise.len()], sep);
    assert_eq!(*enc.tokens.last().unwrap(), sep);
    assert_eq!(enc.tokens.len(), ex.premise.len() + ex.hypothesis.len() + 3);
    // The role positions hold the substituted words.
    assert_eq!(
        enc.tokens[enc.wp_pos],
        config.vocab.id(&ex.w_p),
        "wp position"
    );
    assert_eq!(enc.tokens[enc.wh_pos], config.vocab.id(&ex.w_h));
    assert!(enc.wp_pos >= 1 && enc.wp_pos <= ex.premise.len());
    assert!(enc.wh_pos > ex.premise.len() + 1);
}

#[test]
fn encoded_pair_differs_at_substitution_only() {
    let config = small_config();
    let ex = &small_corpus()[0];
    let enc = encode(ex, &config).unwrap();
    // Encoding premise and hypothesis independently: same template, so the
    // only differing index is the slot.
    let p_ids: Vec<usize> = ex.premise.iter().map(|t| config.vocab.id(t)).collect();
    let h_ids: Vec<usize> = ex.hypothesis.iter().map(|t| config.vocab.id(t)).collect();
    let diffs: Vec<usize> = (0..p_ids.len()).filter(|&i| p_ids[i] != h_ids[i]).collect();
    assert_eq!(diffs.len(), 1);
    assert_eq!(enc.wp_pos, 1 + diffs[0]);
}

#[test]
fn out_of_vocab_tokens_map_to_unk() {
    let config = small_config();
    let mut ex = small_corpus()[0].clone();
    ex.premise[0] = "zyzzyva".into();
    let enc = encode(&ex, &config).unwrap();
    assert_eq!(enc.tokens[1], config.vocab.id(UNK_TOKEN));
}

#[test]
fn encode_rejects_overlong_and_missing_words() {
    let mut config = small_config();
    config.max_len = 10;
    let ex = small_corpus()[0].clone();
    assert!(matches!(
        encode(&ex, &config),
        Err(ModelError::TooLong { .. })
    ));

    let config = small_config();
    let mut missing = ex.clone();
    missing.w_p = "absent".into();
    assert!(matches!(
        encode(&missing, &config),
        Err(ModelError::SubstitutedWord { count: 0, .. })
    ));

    let mut doubled = ex.clone();
    let wp = doubled.w_p.clone();
    doubled.premise[0] = wp;
    assert!(matches!(
        encode(&doubled, &config),
        Err(ModelError::SubstitutedWord { count: 2, .. })
    ));
}

#[test]
fn untrained_forward_is_deterministic() {
    let a = InstrumentedModel::new(small_config()).unwrap();
    let b = InstrumentedModel::new(small_config()).unwrap();
    assert_eq!(a.params_checksum(), b.params_checksum());
    let ex = &small_corpus()[3];
    let (la, ra) = a.forward(ex).unwrap();
    let (lb, rb) = b.forward(ex).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ra.scores, rb.scores);
    for loc in a.locations() {
        assert_eq!(ra.vector(loc), rb.vector(loc));
    }
    assert!(ra.is_finite());
    assert_eq!(ra.location_count(), 3 * a.config().rows);
}

#[test]
fn wh_activation_depends_on_premise_context() {
    let model = InstrumentedModel::new(small_config()).unwrap();
    let corpus = small_corpus();
    // Two examples sharing hypothesis text and wh position but with
    // different premises: the two directions cannot do it, so pick same
    // (template, w_h) across different w_p... the pair (roses→flowers) and
    // (plants→flowers) both have hypothesis "… flowers".
    let a = corpus
        .iter()
        .find(|e| e.w_p == "roses" && e.w_h == "flowers" && !e.negated)
        .unwrap();
    let b = corpus
        .iter()
        .find(|e| e.w_p == "plants" && e.w_h == "flowers" && !e.negated)
        .unwrap();
    assert_eq!(a.hypothesis, b.hypothesis);
    let (_, ra) = model.forward(a).unwrap();
    let (_, rb) = model.forward(b).unwrap();
    let loc = Location::new(1, Role::Wh);
    assert_ne!(ra.vector(loc), rb.vector(loc));
}

#[test]
fn identity_patch_preserves_label() {
    let (model, corpus) = trained_fixture();
    for ex in corpus.iter().step_by(7) {
        let details = model.forward_details(ex).unwrap();
        for loc in model.locations() {
            let patched = model
                .patched_from_details(&details, loc, details.record.vector(loc))
                .unwrap();
            assert_eq!(patched, details.label, "identity patch at {loc}");
        }
    }
}

#[test]
fn patching_recomputes_only_rows_above() {
    let model = InstrumentedModel::new(small_config()).unwrap();
    let ex = &small_corpus()[1];
    let details = model.forward_details(ex).unwrap();
    // A patched pass starting at row 2 reuses rows 0..=1 from the cache by
    // construction; verify the cached rows are untouched by patching.
    let before: Vec<_> = details.rows.iter().map(|r| r.clone()).collect();
    let zero = Array1::zeros(model.config().width);
    let _ = model
        .patched_from_details(&details, Location::new(2, Role::Wh), &zero)
        .unwrap();
    for (a, b) in before.iter().zip(&details.rows) {
        assert_eq!(a, b);
    }
}

#[test]
fn patch_rejects_wrong_dimension_and_row() {
    let model = InstrumentedModel::new(small_config()).unwrap();
    let ex = &small_corpus()[0];
    let bad = Array1::zeros(3);
    assert!(matches!(
        model.forward_patched(ex, Location::new(1, Role::Cls), &bad),
        Err(ModelError::Dimension { got: 3, .. })
    ));
    let good = Array1::zeros(model.config().width);
    assert!(matches!(
        model.forward_patched(ex, Location::new(9, Role::Cls), &good),
        Err(ModelError::BadLocation { row: 9, .. })
    ));
}

#[test]
fn top_row_cls_patch_transfers_donor_label() {
    let (model, corpus) = trained_fixture();
    let recipient = example_by(corpus, false, true);
    let donor = example_by(corpus, false, false);
    assert_eq!(model.predict(recipient).unwrap(), recipient.label);
    assert_eq!(model.predict(donor).unwrap(), donor.label);
    let top_cls = Location::new(model.config().rows, Role::Cls);
    let (_, donor_record) = model.forward(donor).unwrap();
    let patched = model
        .forward_patched(recipient, top_cls, donor_record.vector(top_cls))
        .unwrap();
    // The classifier reads only the top-row CLS vector.
    assert_eq!(patched, donor.label);
}

#[test]
fn gradients_match_finite_differences_on_width8_model() {
    let corpus = small_corpus();
    for seed in [11u64, 12, 13] {
        let vocab = Vocab::build(corpus.iter());
        let config = ModelConfig {
            rows: 2,
            width: 8,
            heads: 2,
            max_len: 24,
            vocab,
            seed,
        };
        let mut model = InstrumentedModel::new(config).unwrap();
        let ex = &corpus[(seed as usize) % corpus.len()];
        let grads = model.example_gradients(ex).unwrap();
        let h = 1e-5;
        for ti in 0..model.param_count() {
            let (rows, cols) = model.param_dim(ti);
            for r in 0..rows {
                for c in 0..cols {
                    model.perturb_param(ti, (r, c), h);
                    let up = model.example_loss(ex).unwrap();
                    model.perturb_param(ti, (r, c), -2.0 * h);
                    let down = model.example_loss(ex).unwrap();
                    model.perturb_param(ti, (r, c), h);
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads[ti][[r, c]];
                    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (analytic - numeric).abs() / denom <= 1e-3,
                        "seed {seed} tensor {} [{r},{c}]: {analytic} vs {numeric}",
                        model.param_name(ti)
                    );
                }
            }
        }
    }
}

#[test]
fn two_example_set_is_memorized() {
    let corpus = small_corpus();
    let set = vec![
        example_by(corpus, false, true).clone(),
        example_by(corpus, false, false).clone(),
    ];
    let hp = TrainHyperparams {
        epochs: 80,
        learning_rate: 5e-3,
        batch_size: 2,
        seed: 0,
        class_weights: None,
    };
    let (model, report) = train(&small_config(), &set, &hp).unwrap();
    assert_eq!(report.final_train_accuracy, 1.0);
    assert_eq!(model.evaluate(&set).unwrap(), 1.0);
}

#[test]
fn training_is_bit_reproducible() {
    let corpus = small_corpus();
    let hp = TrainHyperparams {
        epochs: 3,
        ..TrainHyperparams::default()
    };
    let (a, _) = train(&small_config(), corpus, &hp).unwrap();
    let (b, _) = train(&small_config(), corpus, &hp).unwrap();
    assert_eq!(a.params_checksum(), b.params_checksum());
}

#[test]
fn absurd_learning_rate_diverges() {
    let corpus = small_corpus();
    let hp = TrainHyperparams {
        learning_rate: 1e160,
        epochs: 5,
        ..TrainHyperparams::default()
    };
    let err = train(&small_config(), corpus, &hp).unwrap_err();
    assert!(matches!(err, ModelError::Divergence { .. }));
}

#[test]
fn unbalanced_train_set_requires_weights() {
    let corpus = small_corpus();
    let biased: Vec<NLIExample> = corpus
        .iter()
        .filter(|e| e.label == Label::Entailment)
        .cloned()
        .collect();
    let hp = TrainHyperparams {
        epochs: 1,
        ..TrainHyperparams::default()
    };
    assert!(matches!(
        train(&small_config(), &biased, &hp),
        Err(ModelError::Unbalanced { .. })
    ));
    let weighted = TrainHyperparams {
        epochs: 1,
        class_weights: Some([1.0, 1.0]),
        ..TrainHyperparams::default()
    };
    assert!(train(&small_config(), &biased, &weighted).is_ok());
}

#[test]
fn constant_model_scores_half_on_balanced_set() {
    let mut model = InstrumentedModel::new(small_config()).unwrap();
    // Zero the head weights and bias the entailment logit: every prediction
    // becomes entailment.
    let n = model.net().params.len();
    model.net_mut().params[n - 2].fill(0.0);
    model.net_mut().params[n - 1].fill(0.0);
    model.net_mut().params[n - 1][[0, 0]] = 1.0;
    let acc = model.evaluate(small_corpus()).unwrap();
    assert_eq!(acc, 0.5);
}

#[test]
fn evaluate_agrees_with_forward() {
    let (model, corpus) = trained_fixture();
    let manual = corpus
        .iter()
        .filter(|ex| model.forward(ex).unwrap().0 == ex.label)
        .count() as f64
        / corpus.len() as f64;
    assert_eq!(model.evaluate(corpus).unwrap(), manual);
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let (model, corpus) = trained_fixture();
    model.save(&path).unwrap();
    let loaded = InstrumentedModel::load(&path).unwrap();
    assert_eq!(model.params_checksum(), loaded.params_checksum());
    let ex = &corpus[5];
    let (_, a) = model.forward(ex).unwrap();
    let (_, b) = loaded.forward(ex).unwrap();
    assert_eq!(a.scores, b.scores);
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(
        InstrumentedModel::load(&path),
        Err(ModelError::CheckpointFormat(_))
    ));
}

#[test]
fn inoculation_amount_zero_is_a_no_op() {
    let (model, corpus) = trained_fixture();
    let (orig, chal) = corpus.split_at(corpus.len() / 2);
    let grid = InoculationGrid {
        learning_rates: vec![1e-3],
        epochs: vec![1],
        batch_size: 8,
        seed: 0,
    };
    let outcome = inoculate(model, orig, chal, chal, &[0], &grid).unwrap();
    assert_eq!(outcome.selected.amount, 0);
    assert_eq!(
        outcome.selected.original_accuracy,
        model.evaluate(orig).unwrap()
    );
    assert_eq!(
        outcome.model.params_checksum(),
        model.params_checksum()
    );
}

#[test]
fn inoculation_selects_the_argmax_grid_point() {
    let (model, corpus) = trained_fixture();
    let (orig, chal) = corpus.split_at(corpus.len() / 2);
    let grid = InoculationGrid {
        learning_rates: vec![1e-3, 1e-4],
        epochs: vec![1, 2],
        batch_size: 8,
        seed: 3,
    };
    let outcome = inoculate(model, orig, chal, chal, &[4, 8], &grid).unwrap();
    assert_eq!(outcome.curve.len(), 2 * 4);
    for best in &outcome.per_amount_best {
        for point in outcome.curve.iter().filter(|p| p.amount == best.amount) {
            assert!(best.mean_accuracy() >= point.mean_accuracy());
        }
    }
    for point in &outcome.curve {
        assert!(outcome.selected.mean_accuracy() >= point.mean_accuracy());
    }
}

#[test]
fn inoculation_requires_enough_challenge_data() {
    let (model, corpus) = trained_fixture();
    let err = inoculate(
        model,
        corpus,
        &corpus[..4],
        corpus,
        &[50],
        &InoculationGrid::default(),
    )
    .unwrap_err();
    assert!(matches!(err, ModelError::NotEnoughChallenge { .. }));
}

#[test]
fn vocab_is_dense_with_reserved_specials() {
    let vocab = Vocab::build(small_corpus().iter());
    assert_eq!(vocab.id(CLS_TOKEN), 0);
    assert_eq!(vocab.id(SEP_TOKEN), 1);
    assert_eq!(vocab.id(PAD_TOKEN), 2);
    assert_eq!(vocab.id(UNK_TOKEN), 3);
    for id in 0..vocab.len() {
        assert!(vocab.token(id).is_some());
    }
    assert_eq!(vocab.id("never-seen-token"), 3);
}

#[test]
fn location_grid_enumerates_three_per_row() {
    let grid = Location::grid(4);
    assert_eq!(grid.len(), 12);
    for (i, loc) in grid.iter().enumerate() {
        assert_eq!(loc.index(), i);
    }
    assert_eq!(grid[0], Location::new(1, Role::Cls));
    assert_eq!(format!("{}", Location::new(3, Role::Wh)), "wh3");
}
