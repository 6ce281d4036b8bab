//! Lexical entailment under negation, end to end: generate balanced NLI
//! examples from a hyponymy lexicon, train a small instrumented sequence
//! classifier on them, and then test — behaviorally and structurally —
//! whether the classifier computes the same reversal algorithm that labels
//! the data.
//!
//! The crate is organized around that pipeline:
//!
//! - [`lexicon`]: hyponym/hypernym edges with transitive closure and
//!   lexical-relation queries.
//! - [`data`]: the example record shared by every stage, plus JSON-Lines
//!   dataset I/O.
//! - [`oracle`]: the reference algorithm that labels examples and predicts
//!   counterfactual outcomes of value interchanges.
//! - [`datagen`]: template-based generation, IID and hyponym-disjoint splits,
//!   and an external-corpus adapter.
//! - [`model`]: a from-scratch transformer encoder exposing a
//!   (row × token-role) activation grid, patched forward passes, training,
//!   evaluation, and inoculation fine-tuning.
//! - [`probe`]: bottlenecked linear probes with random-label control tasks
//!   and selectivity scoring.
//! - [`intervene`]: interchange-intervention sweeps, intervention graphs,
//!   greedy clique discovery, and the random-graph baseline.

pub mod data;
pub mod datagen;
pub mod intervene;
pub mod lexicon;
pub mod model;
pub mod oracle;
pub mod probe;

pub use data::{Label, NLIExample};
pub use lexicon::{LexicalRelation, Lexicon};
