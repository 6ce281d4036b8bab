//! Interchange interventions at scale: patched-run experiments over example
//! pairs, the graph whose edges mark pairs on which the model mirrors the
//! reference algorithm's counterfactuals, greedy clique discovery over that
//! graph, and the random-graph baseline that calibrates clique sizes.

mod log;

pub use log::{sweep, SweepLogData, SweepRunner};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, NLIExample};
use crate::model::{ForwardDetails, InstrumentedModel, Location, ModelError, Role};
use crate::oracle::{self, OracleError};

#[derive(Debug, Error)]
pub enum InterveneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("result log I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("result log is malformed: {0}")]
    LogFormat(String),
    #[error("result log does not match this sweep: {0}")]
    LogMismatch(String),
    #[error("results are incomplete: {total} ordered pairs missing (first: {first:?})")]
    IncompleteResults { total: usize, first: Vec<(u32, u32)> },
    #[error("conflicting results for ordered pair ({i}, {j})")]
    InconsistentResults { i: u32, j: u32 },
    #[error("results span multiple locations")]
    MixedLocations,
    #[error("domain error: {0}")]
    Domain(String),
}

/// Anything that can run patched forward passes over an indexed example set.
/// The real model implements this behind cached activations; tests drive the
/// graph machinery with synthetic subjects.
pub trait InterchangeSubject: Sync {
    fn example_count(&self) -> usize;
    fn locations(&self) -> Vec<Location>;
    fn unpatched_label(&self, i: usize) -> Label;
    fn patched_label(
        &self,
        recipient: usize,
        donor: usize,
        loc: Location,
    ) -> Result<Label, InterveneError>;
}

/// The trained model with one cached forward pass per example: donor vectors
/// are read from the cache and patched runs recompute only rows above the
/// patch location.
pub struct ModelSubject<'a> {
    model: &'a InstrumentedModel,
    details: Vec<ForwardDetails>,
}

impl<'a> ModelSubject<'a> {
    pub fn new(
        model: &'a InstrumentedModel,
        examples: &[NLIExample],
    ) -> Result<Self, InterveneError> {
        let details: Vec<ForwardDetails> = examples
            .par_iter()
            .map(|ex| model.forward_details(ex))
            .collect::<Result<_, ModelError>>()?;
        Ok(ModelSubject { model, details })
    }
}

impl InterchangeSubject for ModelSubject<'_> {
    fn example_count(&self) -> usize {
        self.details.len()
    }

    fn locations(&self) -> Vec<Location> {
        self.model.locations()
    }

    fn unpatched_label(&self, i: usize) -> Label {
        self.details[i].label
    }

    fn patched_label(
        &self,
        recipient: usize,
        donor: usize,
        loc: Location,
    ) -> Result<Label, InterveneError> {
        let vector = self.details[donor].record.vector(loc);
        Ok(self
            .model
            .patched_from_details(&self.details[recipient], loc, vector)?)
    }
}

/// Outcome of one patched run, alongside the reference algorithm's
/// counterfactual prediction for the same swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterchangeResult {
    pub i: u32,
    pub j: u32,
    pub location: Location,
    pub patched_label: Label,
    pub unpatched_label: Label,
    pub oracle_label: Label,
    /// Patched output equals the counterfactual prediction.
    pub matches_oracle: bool,
    /// Patching changed the model's output.
    pub causal: bool,
}

/// Runs one interchange: the vector at `loc` computed on `j` replaces the
/// one computed on `i`, and the patched output is compared against the
/// reference counterfactual.
pub fn run_interchange<S: InterchangeSubject + ?Sized>(
    subject: &S,
    examples: &[NLIExample],
    i: usize,
    j: usize,
    loc: Location,
) -> Result<InterchangeResult, InterveneError> {
    let patched_label = subject.patched_label(i, j, loc)?;
    let unpatched_label = subject.unpatched_label(i);
    let oracle_label = oracle::interv_oracle_label(&examples[i], &examples[j])?;
    Ok(InterchangeResult {
        i: i as u32,
        j: j as u32,
        location: loc,
        patched_label,
        unpatched_label,
        oracle_label,
        matches_oracle: patched_label == oracle_label,
        causal: patched_label != unpatched_label,
    })
}

/// The graph over examples whose edges mark pairs passing all four
/// interchange checks; kept dense, the node count is desk-scale.
#[derive(Debug, Clone)]
pub struct InterventionGraph {
    pub location: Location,
    /// Original example ids in dense-index order.
    pub node_ids: Vec<u32>,
    n: usize,
    adjacency: Vec<bool>,
    causal: Vec<bool>,
}

impl InterventionGraph {
    /// Builds a graph directly from an edge list (dense indices into
    /// `node_ids`).
    pub fn from_parts(
        location: Location,
        node_ids: Vec<u32>,
        edges: &[(usize, usize, bool)],
    ) -> Self {
        let n = node_ids.len();
        let mut graph = InterventionGraph {
            location,
            node_ids,
            n,
            adjacency: vec![false; n * n],
            causal: vec![false; n * n],
        };
        for &(a, b, causal) in edges {
            graph.set_edge(a, b, causal);
        }
        graph
    }

    fn set_edge(&mut self, a: usize, b: usize, causal: bool) {
        if a == b {
            return;
        }
        self.adjacency[a * self.n + b] = true;
        self.adjacency[b * self.n + a] = true;
        if causal {
            self.causal[a * self.n + b] = true;
            self.causal[b * self.n + a] = true;
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.n + b]
    }

    pub fn is_causal_edge(&self, a: usize, b: usize) -> bool {
        self.causal[a * self.n + b]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    pub fn causal_edge_count(&self) -> usize {
        self.causal.iter().filter(|&&e| e).count() / 2
    }

    /// DOT rendering with causal edges styled distinctly.
    pub fn to_dot(&self, label: impl Fn(u32) -> String) -> String {
        let mut out = format!("graph intervention_{} {{\n", self.location);
        out.push_str("  node [shape=circle fontsize=9];\n");
        for (idx, &id) in self.node_ids.iter().enumerate() {
            out.push_str(&format!("  n{idx} [label=\"{}\"];\n", label(id)));
        }
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                if self.has_edge(a, b) {
                    if self.is_causal_edge(a, b) {
                        out.push_str(&format!("  n{a} -- n{b} [color=red penwidth=1.6];\n"));
                    } else {
                        out.push_str(&format!("  n{a} -- n{b} [color=gray70];\n"));
                    }
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Assembles the graph for one location from a complete result set: an edge
/// requires the model correct on both self-interchanges and both
/// cross-interchanges matching the counterfactual; the causal flag records
/// whether either cross run changed the output.
pub fn build_graph(results: &[InterchangeResult]) -> Result<InterventionGraph, InterveneError> {
    if results.is_empty() {
        return Err(InterveneError::IncompleteResults {
            total: 0,
            first: Vec::new(),
        });
    }
    let location = results[0].location;
    if results.iter().any(|r| r.location != location) {
        return Err(InterveneError::MixedLocations);
    }

    let mut ids: Vec<u32> = results.iter().flat_map(|r| [r.i, r.j]).collect();
    ids.sort_unstable();
    ids.dedup();
    let dense: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(d, &id)| (id, d)).collect();
    let n = ids.len();

    let mut table: Vec<Option<&InterchangeResult>> = vec![None; n * n];
    for r in results {
        let a = dense[&r.i];
        let b = dense[&r.j];
        if let Some(existing) = table[a * n + b] {
            if existing != r {
                return Err(InterveneError::InconsistentResults { i: r.i, j: r.j });
            }
        }
        table[a * n + b] = Some(r);
    }

    let mut missing = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if table[a * n + b].is_none() {
                missing.push((ids[a], ids[b]));
            }
        }
    }
    if !missing.is_empty() {
        let total = missing.len();
        missing.truncate(16);
        return Err(InterveneError::IncompleteResults {
            total,
            first: missing,
        });
    }

    let mut graph = InterventionGraph {
        location,
        node_ids: ids,
        n,
        adjacency: vec![false; n * n],
        causal: vec![false; n * n],
    };
    let correct: Vec<bool> = (0..n)
        .map(|a| table[a * n + a].expect("checked complete").matches_oracle)
        .collect();
    for a in 0..n {
        for b in (a + 1)..n {
            let ab = table[a * n + b].unwrap();
            let ba = table[b * n + a].unwrap();
            if correct[a] && correct[b] && ab.matches_oracle && ba.matches_oracle {
                graph.set_edge(a, b, ab.causal || ba.causal);
            }
        }
    }
    Ok(graph)
}

/// One discovered clique. Members are original example ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CliqueReport {
    pub members: Vec<u32>,
    pub size: usize,
    pub causal_edges: usize,
    pub alpha: u32,
    /// Members grouped by the hyponym of their substituted pair; empty until
    /// attached from a dataset.
    pub hyponym_groups: Vec<(String, Vec<u32>)>,
}

impl CliqueReport {
    /// Fills the per-hyponym grouping from the dataset the graph was built
    /// over.
    pub fn attach_hyponyms(&mut self, examples: &[NLIExample]) {
        let mut groups: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for &id in &self.members {
            let hyponym = examples
                .get(id as usize)
                .map(|e| e.hyponym().to_string())
                .unwrap_or_else(|| format!("id{id}"));
            groups.entry(hyponym).or_default().push(id);
        }
        let mut ordered: Vec<(String, Vec<u32>)> = groups.into_iter().collect();
        ordered.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        self.hyponym_groups = ordered;
    }
}

struct DegreeState<'g> {
    graph: &'g InterventionGraph,
    alive: Vec<bool>,
    total: Vec<usize>,
    causal: Vec<usize>,
    count: usize,
}

impl<'g> DegreeState<'g> {
    fn new(graph: &'g InterventionGraph, alive: Vec<bool>) -> Self {
        let n = graph.node_count();
        let mut total = vec![0usize; n];
        let mut causal = vec![0usize; n];
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for b in 0..n {
                if a != b && alive[b] && graph.has_edge(a, b) {
                    total[a] += 1;
                    if graph.is_causal_edge(a, b) {
                        causal[a] += 1;
                    }
                }
            }
        }
        let count = alive.iter().filter(|&&x| x).count();
        DegreeState {
            graph,
            alive,
            total,
            causal,
            count,
        }
    }

    fn remove(&mut self, node: usize) {
        self.alive[node] = false;
        self.count -= 1;
        for b in 0..self.graph.node_count() {
            if self.alive[b] && self.graph.has_edge(node, b) {
                self.total[b] -= 1;
                if self.graph.is_causal_edge(node, b) {
                    self.causal[b] -= 1;
                }
            }
        }
    }

    fn argmin(&self, degrees: &[usize]) -> Option<usize> {
        let mut best: Option<usize> = None;
        for v in 0..self.graph.node_count() {
            if self.alive[v] && best.map_or(true, |b| degrees[v] < degrees[b]) {
                best = Some(v);
            }
        }
        best
    }

    fn is_clique(&self) -> bool {
        let want = self.count.saturating_sub(1);
        (0..self.graph.node_count())
            .filter(|&v| self.alive[v])
            .all(|v| self.total[v] == want)
    }
}

/// Greedy clique extraction. Phase 1 removes nodes of minimum causal degree
/// while that minimum is below `alpha`; phase 2 removes nodes of minimum
/// total degree until only a clique remains. Cliques without a causal edge
/// are rejected (they would be vacuous: one lexical relation only), and the
/// procedure repeats on the remainder to emit disjoint cliques.
pub fn greedy_clique(graph: &InterventionGraph, alpha: u32) -> Vec<CliqueReport> {
    let n = graph.node_count();
    let mut available = vec![true; n];
    let mut cliques = Vec::new();

    loop {
        let mut state = DegreeState::new(graph, available.clone());

        // Phase 1: enforce the causal-degree floor.
        while state.count > 0 {
            let node = state.argmin(&state.causal).expect("count > 0");
            if state.causal[node] >= alpha as usize {
                break;
            }
            state.remove(node);
        }

        // Phase 2: shave minimum-total-degree nodes down to a clique.
        while state.count > 0 && !state.is_clique() {
            let node = state.argmin(&state.total).expect("count > 0");
            state.remove(node);
        }

        let members: Vec<usize> = (0..n).filter(|&v| state.alive[v]).collect();
        let causal_edges = members
            .iter()
            .enumerate()
            .flat_map(|(k, &a)| members[k + 1..].iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| graph.is_causal_edge(a, b))
            .count();
        if members.len() < 2 || causal_edges == 0 {
            break;
        }
        for &m in &members {
            available[m] = false;
        }
        cliques.push(CliqueReport {
            members: members.iter().map(|&m| graph.node_ids[m]).collect(),
            size: members.len(),
            causal_edges,
            alpha,
            hyponym_groups: Vec::new(),
        });
        if available.iter().filter(|&&a| a).count() < 2 {
            break;
        }
    }
    cliques
}

/// Sweeps `alpha` over a range, keeping every clique found; the caller
/// typically reports the largest per alpha.
pub fn greedy_clique_alpha_sweep(
    graph: &InterventionGraph,
    alphas: std::ops::RangeInclusive<u32>,
) -> Vec<CliqueReport> {
    let mut out = Vec::new();
    for alpha in alphas {
        out.extend(greedy_clique(graph, alpha));
    }
    out
}

/// Independent cliqueness check: every member pair must be an edge, with at
/// least one causal edge present.
pub fn verify_clique(graph: &InterventionGraph, members: &[u32]) -> bool {
    let dense: BTreeMap<u32, usize> = graph
        .node_ids
        .iter()
        .enumerate()
        .map(|(d, &id)| (id, d))
        .collect();
    let idx: Option<Vec<usize>> = members.iter().map(|m| dense.get(m).copied()).collect();
    let Some(idx) = idx else { return false };
    let mut causal = 0;
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            if !graph.has_edge(a, b) {
                return false;
            }
            if graph.is_causal_edge(a, b) {
                causal += 1;
            }
        }
    }
    causal >= 1
}

/// Expected number of k-cliques in a G(n, p) random graph:
/// C(n, k) · p^(k·(k−1)/2). Uses exact arithmetic when the binomial fits a
/// double and log-gamma otherwise, so large inputs neither overflow nor
/// underflow spuriously.
pub fn expected_cliques(n: u64, k: u64, p: f64) -> Result<f64, InterveneError> {
    if k < 1 || k > n {
        return Err(InterveneError::Domain(format!(
            "clique size k={k} outside 1..=n ({n})"
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(InterveneError::Domain(format!(
            "edge probability {p} outside (0, 1]"
        )));
    }
    let pairs = k * (k - 1) / 2;
    if let Some(binom) = binomial_u128(n, k) {
        if binom <= (1u128 << 53) && pairs <= i32::MAX as u64 {
            return Ok(binom as f64 * p.powi(pairs as i32));
        }
    }
    let ln = ln_binomial(n, k) + pairs as f64 * p.ln();
    Ok(ln.exp())
}

fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 1..=k {
        c = c.checked_mul((n - k + i) as u128)? / i as u128;
    }
    Some(c)
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// Scores one partial graph: the fraction of connected triples that close
/// into a triangle containing at least one causal edge. Zero when the graph
/// has no causal signal at all.
pub fn causal_clustering_score(graph: &InterventionGraph) -> f64 {
    let n = graph.node_count();
    let mut triads = 0u64;
    for v in 0..n {
        let deg = (0..n).filter(|&u| u != v && graph.has_edge(v, u)).count() as u64;
        triads += deg * deg.saturating_sub(1) / 2;
    }
    if triads == 0 {
        return 0.0;
    }
    let mut causal_triangles = 0u64;
    for a in 0..n {
        for b in (a + 1)..n {
            if !graph.has_edge(a, b) {
                continue;
            }
            for c in (b + 1)..n {
                if graph.has_edge(a, c) && graph.has_edge(b, c) {
                    let has_causal = graph.is_causal_edge(a, b)
                        || graph.is_causal_edge(a, c)
                        || graph.is_causal_edge(b, c);
                    if has_causal {
                        causal_triangles += 1;
                    }
                }
            }
        }
    }
    3.0 * causal_triangles as f64 / triads as f64
}

/// Ranks grid locations by running interchanges over a small random node
/// sample (all ordered pairs within it, ≈ `budget` experiments per location)
/// and scoring each partial graph by causal-weighted clustering. Ties keep
/// grid order.
pub fn choose_location<S: InterchangeSubject + ?Sized>(
    subject: &S,
    examples: &[NLIExample],
    budget: usize,
    seed: u64,
) -> Result<Vec<(Location, f64)>, InterveneError> {
    if budget < 100 {
        return Err(InterveneError::Domain(format!(
            "location-selection budget {budget} below 100 pairs"
        )));
    }
    let n = subject.example_count();
    if n < 2 {
        return Err(InterveneError::Domain("need at least two examples".into()));
    }
    let sample_size = ((budget as f64).sqrt().floor() as usize).clamp(2, n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(sample_size);
    ids.sort_unstable();

    let locations = subject.locations();
    let mut scored: Vec<(Location, f64)> = locations
        .par_iter()
        .map(|&loc| {
            let mut results = Vec::with_capacity(ids.len() * ids.len());
            for &i in &ids {
                for &j in &ids {
                    results.push(run_interchange(subject, examples, i, j, loc)?);
                }
            }
            let graph = build_graph(&results)?;
            Ok((loc, causal_clustering_score(&graph)))
        })
        .collect::<Result<_, InterveneError>>()?;

    // Stable by score descending; grid order breaks ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
    Ok(scored)
}

/// Writes cliques as CSV grouped by hyponym:
/// `clique,alpha,size,causal_edges,hyponym,example_id,w_p,w_h,lexrel,negated`.
pub fn write_cliques_csv(
    path: impl AsRef<Path>,
    cliques: &[CliqueReport],
    examples: &[NLIExample],
) -> Result<(), InterveneError> {
    let mut out =
        String::from("clique,alpha,size,causal_edges,hyponym,example_id,w_p,w_h,lexrel,negated\n");
    for (idx, clique) in cliques.iter().enumerate() {
        let mut grouped = clique.clone();
        grouped.attach_hyponyms(examples);
        for (hyponym, members) in &grouped.hyponym_groups {
            for &id in members {
                let (w_p, w_h, lexrel, negated) = examples
                    .get(id as usize)
                    .map(|e| {
                        (
                            e.w_p.clone(),
                            e.w_h.clone(),
                            e.lexrel.to_string(),
                            e.negated,
                        )
                    })
                    .unwrap_or_else(|| (String::new(), String::new(), String::new(), false));
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    idx,
                    clique.alpha,
                    clique.size,
                    clique.causal_edges,
                    hyponym,
                    id,
                    w_p,
                    w_h,
                    lexrel,
                    negated
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Role order used in the binary log encoding.
pub(crate) fn role_code(role: Role) -> u8 {
    role.index() as u8
}

pub(crate) fn role_from_code(code: u8) -> Option<Role> {
    Role::from_index(code as usize)
}
