//! A desk-scale instrumented sequence classifier.
//!
//! The encoder exposes a (row × token-role) grid of activation vectors: one
//! vector per encoder layer for each of the `[CLS]` token and the two
//! substituted words. Forward passes can be patched — the vector at one grid
//! location overwritten before the rows above it recompute — which is the
//! primitive behind interchange interventions.

mod checkpoint;
pub(crate) mod net;

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, NLIExample};
use net::{Adam, Net};

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("substituted word {word:?} occurs {count} times in the {which}")]
    SubstitutedWord {
        word: String,
        which: &'static str,
        count: usize,
    },
    #[error("vector dimension {got} does not match model width {want}")]
    Dimension { got: usize, want: usize },
    #[error("location row {row} outside 1..={rows}")]
    BadLocation { row: usize, rows: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(
        "train set is unbalanced ({entailment} entailment vs {neutral} neutral) \
         and no class weights were given"
    )]
    Unbalanced { entailment: usize, neutral: usize },
    #[error("not enough challenge data: largest amount is {need}, have {have}")]
    NotEnoughChallenge { need: usize, have: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    CheckpointFormat(String),
}

/// Token roles carrying analysis interest: the classifier token and the two
/// substituted words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Cls,
    Wp,
    Wh,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Cls, Role::Wp, Role::Wh];

    pub fn index(self) -> usize {
        match self {
            Role::Cls => 0,
            Role::Wp => 1,
            Role::Wh => 2,
        }
    }

    pub fn from_index(idx: usize) -> Option<Role> {
        Role::ALL.get(idx).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Cls => "cls",
            Role::Wp => "wp",
            Role::Wh => "wh",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One cell of the activation grid: an encoder row (1-based) crossed with a
/// token role. A model with R rows has exactly 3·R locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub row: usize,
    pub role: Role,
}

impl Location {
    pub fn new(row: usize, role: Role) -> Self {
        Location { row, role }
    }

    /// The full grid for a model with `rows` encoder layers, in
    /// (row, role) order.
    pub fn grid(rows: usize) -> Vec<Location> {
        let mut out = Vec::with_capacity(3 * rows);
        for row in 1..=rows {
            for role in Role::ALL {
                out.push(Location { row, role });
            }
        }
        out
    }

    /// Dense index within the grid of a model with the same row count.
    pub fn index(&self) -> usize {
        (self.row - 1) * 3 + self.role.index()
    }
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.role, self.row)
    }
}

/// Token-to-index map with reserved specials at the dense front.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from a corpus: the four specials, then every
    /// distinct sentence token in lexicographic order.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a NLIExample>) -> Vocab {
        let mut words = std::collections::BTreeSet::new();
        for ex in examples {
            for tok in ex.premise.iter().chain(ex.hypothesis.iter()) {
                words.insert(tok.clone());
            }
        }
        let mut tokens: Vec<String> = [CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(words);
        Vocab::from(tokens)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK_TOKEN])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.tokens
    }
}

/// Model architecture and tokenizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder layer count R; the grid has 3·R locations.
    pub rows: usize,
    /// Hidden dimension.
    pub width: usize,
    /// Attention head count; must divide `width`.
    pub heads: usize,
    /// Maximum sequence length after adding specials.
    pub max_len: usize,
    pub vocab: Vocab,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab: Vocab) -> Self {
        ModelConfig {
            rows: 4,
            width: 64,
            heads: 4,
            max_len: 32,
            vocab,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rows == 0 {
            return Err(ModelError::Config("rows must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.max_len < 5 {
            return Err(ModelError::Config("max_len too small".into()));
        }
        for special in [CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN] {
            if !self.vocab.contains(special) {
                return Err(ModelError::Config(format!("vocab lacks {special}")));
            }
        }
        Ok(())
    }
}

/// An example encoded as `[CLS] premise [SEP] hypothesis [SEP]`, with the
/// positions of the three role tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub cls_pos: usize,
    pub wp_pos: usize,
    pub wh_pos: usize,
}

impl EncodedExample {
    pub fn position(&self, role: Role) -> usize {
        match role {
            Role::Cls => self.cls_pos,
            Role::Wp => self.wp_pos,
            Role::Wh => self.wh_pos,
        }
    }
}

fn locate_once(
    tokens: &[String],
    word: &str,
    which: &'static str,
) -> Result<usize, ModelError> {
    let hits: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() == word)
        .map(|(i, _)| i)
        .collect();
    if hits.len() == 1 {
        Ok(hits[0])
    } else {
        Err(ModelError::SubstitutedWord {
            word: word.to_string(),
            which,
            count: hits.len(),
        })
    }
}

/// Encodes an example under a config's vocabulary. Out-of-vocabulary tokens
/// map to `[UNK]`; the substituted words must each occur exactly once in
/// their sentence.
pub fn encode(example: &NLIExample, config: &ModelConfig) -> Result<EncodedExample, ModelError> {
    let p_idx = locate_once(&example.premise, &example.w_p, "premise")?;
    let h_idx = locate_once(&example.hypothesis, &example.w_h, "hypothesis")?;

    let len = example.premise.len() + example.hypothesis.len() + 3;
    if len > config.max_len {
        return Err(ModelError::TooLong {
            len,
            max: config.max_len,
        });
    }

    let mut tokens = Vec::with_capacity(len);
    tokens.push(config.vocab.id(CLS_TOKEN));
    for t in &example.premise {
        tokens.push(config.vocab.id(t));
    }
    tokens.push(config.vocab.id(SEP_TOKEN));
    let hyp_start = tokens.len();
    for t in &example.hypothesis {
        tokens.push(config.vocab.id(t));
    }
    tokens.push(config.vocab.id(SEP_TOKEN));

    Ok(EncodedExample {
        tokens,
        cls_pos: 0,
        wp_pos: 1 + p_idx,
        wh_pos: hyp_start + h_idx,
    })
}

/// Per-location activation vectors captured from one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    vectors: Vec<Array1<f64>>,
    pub predicted: Label,
    pub scores: [f64; 2],
}

impl ActivationRecord {
    pub fn vector(&self, loc: Location) -> &Array1<f64> {
        &self.vectors[loc.index()]
    }

    pub fn location_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A forward pass kept around for patching: all row matrices plus the role
/// positions, so rows below a patch location never need recomputing.
#[derive(Debug, Clone)]
pub struct ForwardDetails {
    pub label: Label,
    pub scores: [f64; 2],
    pub record: ActivationRecord,
    rows: Vec<Array2<f64>>,
    encoded: EncodedExample,
}

fn argmax_label(scores: [f64; 2]) -> Label {
    if scores[1] > scores[0] {
        Label::Neutral
    } else {
        Label::Entailment
    }
}

/// The trainable classifier with its activation grid.
#[derive(Clone)]
pub struct InstrumentedModel {
    config: ModelConfig,
    net: Net,
}

impl std::fmt::Debug for InstrumentedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstrumentedModel")
            .field("rows", &self.config.rows)
            .field("width", &self.config.width)
            .field("heads", &self.config.heads)
            .field("vocab", &self.config.vocab.len())
            .field("params_checksum", &self.params_checksum())
            .finish()
    }
}

impl InstrumentedModel {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let net = Net::new(
            config.rows,
            config.width,
            config.heads,
            config.vocab.len(),
            config.max_len,
            config.seed,
        );
        Ok(InstrumentedModel { config, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn locations(&self) -> Vec<Location> {
        Location::grid(self.config.rows)
    }

    fn check_location(&self, loc: Location) -> Result<(), ModelError> {
        if loc.row == 0 || loc.row > self.config.rows {
            return Err(ModelError::BadLocation {
                row: loc.row,
                rows: self.config.rows,
            });
        }
        Ok(())
    }

    /// Full forward pass, capturing the activation grid.
    pub fn forward(&self, example: &NLIExample) -> Result<(Label, ActivationRecord), ModelError> {
        let details = self.forward_details(example)?;
        Ok((details.label, details.record))
    }

    /// Forward pass retaining the row matrices for later patching.
    pub fn forward_details(&self, example: &NLIExample) -> Result<ForwardDetails, ModelError> {
        let encoded = encode(example, &self.config)?;
        let rows = self.net.forward_rows(&encoded.tokens);
        let scores = self.net.logits(&rows[self.config.rows]);
        let label = argmax_label(scores);

        let mut vectors = Vec::with_capacity(3 * self.config.rows);
        for loc in Location::grid(self.config.rows) {
            let pos = encoded.position(loc.role);
            vectors.push(rows[loc.row].row(pos).to_owned());
        }
        let record = ActivationRecord {
            vectors,
            predicted: label,
            scores,
        };
        Ok(ForwardDetails {
            label,
            scores,
            record,
            rows,
            encoded,
        })
    }

    /// Plain prediction without capturing activations.
    pub fn predict(&self, example: &NLIExample) -> Result<Label, ModelError> {
        let encoded = encode(example, &self.config)?;
        let rows = self.net.forward_rows(&encoded.tokens);
        Ok(argmax_label(self.net.logits(&rows[self.config.rows])))
    }

    /// Forward pass with the vector at `loc` overwritten by `vector` after
    /// that row's layer computes, before any row above consumes it.
    pub fn forward_patched(
        &self,
        example: &NLIExample,
        loc: Location,
        vector: &Array1<f64>,
    ) -> Result<Label, ModelError> {
        let details = self.forward_details(example)?;
        self.patched_from_details(&details, loc, vector)
    }

    /// Patched forward reusing a cached pass; rows below `loc.row` are taken
    /// from the cache unchanged.
    pub fn patched_from_details(
        &self,
        details: &ForwardDetails,
        loc: Location,
        vector: &Array1<f64>,
    ) -> Result<Label, ModelError> {
        self.check_location(loc)?;
        if vector.len() != self.config.width {
            return Err(ModelError::Dimension {
                got: vector.len(),
                want: self.config.width,
            });
        }
        let mut x = details.rows[loc.row].clone();
        x.row_mut(details.encoded.position(loc.role)).assign(vector);
        let top = if loc.row == self.config.rows {
            x
        } else {
            self.net.forward_from_row(loc.row, x)
        };
        Ok(argmax_label(self.net.logits(&top)))
    }

    /// Accuracy over a dataset. Runs in parallel; the result is identical to
    /// a serial pass because only per-example correctness counts are summed.
    pub fn evaluate(&self, dataset: &[NLIExample]) -> Result<f64, ModelError> {
        if dataset.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let correct = dataset
            .par_iter()
            .map(|ex| Ok(usize::from(self.predict(ex)? == ex.label)))
            .collect::<Result<Vec<usize>, ModelError>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Continues training this model's parameters on `train_set`.
    pub fn fine_tuned(
        &self,
        train_set: &[NLIExample],
        hp: &TrainHyperparams,
    ) -> Result<(InstrumentedModel, TrainReport), ModelError> {
        let mut model = self.clone();
        let report = model.train_in_place(train_set, hp)?;
        Ok((model, report))
    }

    fn train_in_place(
        &mut self,
        train_set: &[NLIExample],
        hp: &TrainHyperparams,
    ) -> Result<TrainReport, ModelError> {
        if train_set.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let n0 = train_set.iter().filter(|e| e.label == Label::Entailment).count();
        let n1 = train_set.len() - n0;
        let class_weights = match hp.class_weights {
            Some(w) => w,
            None => {
                let n = train_set.len() as f64;
                if (n0 as f64 - n1 as f64).abs() / n > 0.1 {
                    return Err(ModelError::Unbalanced {
                        entailment: n0,
                        neutral: n1,
                    });
                }
                [1.0, 1.0]
            }
        };

        let encoded: Vec<(Vec<usize>, usize, f64)> = train_set
            .iter()
            .map(|ex| {
                encode(ex, &self.config).map(|enc| {
                    let li = ex.label.index();
                    (enc.tokens, li, class_weights[li])
                })
            })
            .collect::<Result<_, _>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut adam = Adam::new(&self.net.params, hp.learning_rate);
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut epochs_run = 0;
        let mut final_train_accuracy = 0.0;
        let mut perfect_streak = 0;

        for epoch in 1..=hp.epochs {
            epochs_run = epoch;
            order.shuffle(&mut rng);
            for batch in order.chunks(hp.batch_size.max(1)) {
                let mut grads = self.net.zero_like();
                let scale = 1.0 / batch.len() as f64;
                let mut batch_loss = 0.0;
                for &idx in batch {
                    let (tokens, label, weight) = &encoded[idx];
                    batch_loss +=
                        self.net
                            .loss_and_grad(tokens, *label, weight * scale, &mut grads);
                }
                if !batch_loss.is_finite() {
                    return Err(ModelError::Divergence { epoch });
                }
                adam.step(&mut self.net.params, &grads);
            }

            final_train_accuracy = self.evaluate(train_set)?;
            if final_train_accuracy == 1.0 {
                perfect_streak += 1;
                if perfect_streak >= 2 {
                    break;
                }
            } else {
                perfect_streak = 0;
            }
        }

        Ok(TrainReport {
            epochs_run,
            final_train_accuracy,
            eval_accuracies: Vec::new(),
            hyperparams: hp.clone(),
        })
    }

    /// Stable checksum of all parameters, for determinism checks.
    pub fn params_checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for p in &self.net.params {
            for &x in p.iter() {
                hasher.write_u64(x.to_bits());
            }
        }
        hasher.finish()
    }

    // ----- instrumentation hooks (also used by finite-difference tests) ----

    pub fn param_count(&self) -> usize {
        self.net.params.len()
    }

    pub fn param_name(&self, idx: usize) -> &str {
        &self.net.names()[idx]
    }

    pub fn param_dim(&self, idx: usize) -> (usize, usize) {
        let d = self.net.params[idx].raw_dim();
        (d[0], d[1])
    }

    pub fn perturb_param(&mut self, idx: usize, entry: (usize, usize), delta: f64) {
        self.net.params[idx][[entry.0, entry.1]] += delta;
    }

    /// Cross-entropy loss of one example under the current parameters.
    pub fn example_loss(&self, example: &NLIExample) -> Result<f64, ModelError> {
        let enc = encode(example, &self.config)?;
        Ok(self.net.loss(&enc.tokens, example.label.index(), 1.0))
    }

    /// Analytic gradients of `example_loss` for every parameter tensor.
    pub fn example_gradients(&self, example: &NLIExample) -> Result<Vec<Array2<f64>>, ModelError> {
        let enc = encode(example, &self.config)?;
        let mut grads = self.net.zero_like();
        self.net
            .loss_and_grad(&enc.tokens, example.label.index(), 1.0, &mut grads);
        Ok(grads)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        checkpoint::save(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        checkpoint::load(path.as_ref())
    }

    pub(crate) fn net(&self) -> &Net {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }
}

/// First-order optimizer settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffle seed; parameter init comes from the model config.
    pub seed: u64,
    /// Per-class loss weights (entailment, neutral). Required when the train
    /// set is not label-balanced.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            class_weights: None,
        }
    }
}

/// Outcome summary of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_accuracy: f64,
    /// Filled by callers that evaluate the model on named datasets.
    pub eval_accuracies: Vec<(String, f64)>,
    pub hyperparams: TrainHyperparams,
}

/// Trains a fresh model from `config` on `train_set`.
pub fn train(
    config: &ModelConfig,
    train_set: &[NLIExample],
    hp: &TrainHyperparams,
) -> Result<(InstrumentedModel, TrainReport), ModelError> {
    let mut model = InstrumentedModel::new(config.clone())?;
    let report = model.train_in_place(train_set, hp)?;
    Ok((model, report))
}

/// Grid searched per inoculation amount.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InoculationGrid {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InoculationGrid {
    fn default() -> Self {
        InoculationGrid {
            learning_rates: vec![1e-3, 3e-4, 1e-4],
            epochs: vec![8],
            batch_size: 32,
            seed: 0,
        }
    }
}

/// One fine-tuning experiment: an amount of challenge data and a grid point,
/// with the two accuracies that the selection rule averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InoculationPoint {
    pub amount: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub original_accuracy: f64,
    pub challenge_accuracy: f64,
}

impl InoculationPoint {
    pub fn mean_accuracy(&self) -> f64 {
        0.5 * (self.original_accuracy + self.challenge_accuracy)
    }
}

/// The selected model plus the full accuracy curve.
#[derive(Debug)]
pub struct InoculationOutcome {
    pub model: InstrumentedModel,
    pub selected: InoculationPoint,
    /// Every grid point evaluated, in (amount, grid) order.
    pub curve: Vec<InoculationPoint>,
    /// The best point per amount (highest mean accuracy).
    pub per_amount_best: Vec<InoculationPoint>,
}

/// Fine-tunes copies of `base` on graded amounts of challenge data, and for
/// each amount selects the grid point with the highest mean of original and
/// challenge accuracy; returns the overall best model and the full curve.
pub fn inoculate(
    base: &InstrumentedModel,
    original_eval: &[NLIExample],
    challenge_train: &[NLIExample],
    challenge_eval: &[NLIExample],
    amounts: &[usize],
    grid: &InoculationGrid,
) -> Result<InoculationOutcome, ModelError> {
    if amounts.is_empty() {
        return Err(ModelError::Config("inoculation amounts are empty".into()));
    }
    let max_amount = amounts.iter().copied().max().unwrap_or(0);
    if challenge_train.len() < max_amount {
        return Err(ModelError::NotEnoughChallenge {
            need: max_amount,
            have: challenge_train.len(),
        });
    }

    let mut pool: Vec<NLIExample> = challenge_train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    pool.shuffle(&mut rng);

    let base_original = base.evaluate(original_eval)?;
    let base_challenge = base.evaluate(challenge_eval)?;

    // Every (amount, lr, epochs) job, run in parallel and collected in
    // deterministic order.
    let mut jobs: Vec<(usize, f64, usize)> = Vec::new();
    for &amount in amounts {
        if amount == 0 {
            continue;
        }
        for &lr in &grid.learning_rates {
            for &ep in &grid.epochs {
                jobs.push((amount, lr, ep));
            }
        }
    }

    let results: Vec<(InoculationPoint, InstrumentedModel)> = jobs
        .par_iter()
        .map(|&(amount, lr, ep)| {
            let slice = &pool[..amount];
            let n0 = slice.iter().filter(|e| e.label == Label::Entailment).count();
            let n1 = slice.len() - n0;
            let weights = if n0 == 0 || n1 == 0 {
                [1.0, 1.0]
            } else {
                let n = slice.len() as f64;
                [n / (2.0 * n0 as f64), n / (2.0 * n1 as f64)]
            };
            let hp = TrainHyperparams {
                learning_rate: lr,
                batch_size: grid.batch_size,
                epochs: ep,
                seed: grid.seed,
                class_weights: Some(weights),
            };
            let (model, _) = base.fine_tuned(slice, &hp)?;
            let point = InoculationPoint {
                amount,
                learning_rate: lr,
                epochs: ep,
                original_accuracy: model.evaluate(original_eval)?,
                challenge_accuracy: model.evaluate(challenge_eval)?,
            };
            Ok((point, model))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut curve = Vec::new();
    let mut per_amount_best: Vec<InoculationPoint> = Vec::new();
    let mut candidates: Vec<(InoculationPoint, Option<InstrumentedModel>)> = Vec::new();

    for &amount in amounts {
        if amount == 0 {
            let point = InoculationPoint {
                amount: 0,
                learning_rate: 0.0,
                epochs: 0,
                original_accuracy: base_original,
                challenge_accuracy: base_challenge,
            };
            curve.push(point.clone());
            per_amount_best.push(point.clone());
            candidates.push((point, None));
            continue;
        }
        let mut best: Option<(InoculationPoint, InstrumentedModel)> = None;
        for (point, model) in results.iter().filter(|(p, _)| p.amount == amount) {
            curve.push(point.clone());
            let better = match &best {
                None => true,
                Some((cur, _)) => point.mean_accuracy() > cur.mean_accuracy(),
            };
            if better {
                best = Some((point.clone(), model.clone()));
            }
        }
        let (point, model) = best.expect("non-zero amount has at least one grid point");
        per_amount_best.push(point.clone());
        candidates.push((point, Some(model)));
    }

    let (selected, model) = candidates
        .into_iter()
        .max_by(|(a, _), (b, _)| {
            a.mean_accuracy()
                .partial_cmp(&b.mean_accuracy())
                .expect("accuracies are finite")
        })
        .expect("at least one amount");

    Ok(InoculationOutcome {
        model: model.unwrap_or_else(|| base.clone()),
        selected,
        curve,
        per_amount_best,
    })
}

#[cfg(test)]
pub(crate) mod tests;
