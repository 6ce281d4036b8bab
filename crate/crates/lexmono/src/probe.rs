//! Supervised probes over stored activations, with random-label control
//! tasks and selectivity scoring.
//!
//! A probe predicts the value of the algorithm's intermediate variable (or
//! its output) from the activation vector at one grid location. The probe is
//! deliberately small: two stacked linear maps (width → 4 → 2) with no
//! intervening nonlinearity, i.e. a rank-4 bottlenecked linear classifier.
//! Each task probe is paired with a control probe trained on randomly
//! assigned labels under the same budget; selectivity is the difference of
//! the two accuracies.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NLIExample;
use crate::lexicon::LexicalRelation;
use crate::model::net::Adam;
use crate::model::{InstrumentedModel, Location, ModelError};
use crate::oracle::{self, OracleError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe targets are degenerate: only one class present")]
    DegenerateTargets,
    #[error("no examples to probe")]
    EmptyDataset,
    #[error("activation matrix has {rows} rows but {targets} targets")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("probe I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// What the probe predicts: the intermediate variable or the algorithm's
/// output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Lexrel,
    InferOutput,
}

impl ProbeTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTarget::Lexrel => "lexrel",
            ProbeTarget::InferOutput => "infer_output",
        }
    }
}

impl std::fmt::Display for ProbeTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How control labels are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Uniform random label per example.
    #[default]
    PerExample,
    /// A fixed random label per hyponym type, shared by all its examples.
    PerHyponym,
}

/// One probing task; `control = true` replaces gold targets with random
/// labels drawn once under `seed` and fixed for the task's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTask {
    pub target: ProbeTarget,
    pub control: bool,
    pub seed: u64,
}

/// Training settings shared by task and control probes, so selectivity
/// compares like with like.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Early stop when the training loss improves by less than
    /// `plateau_tolerance` for this many consecutive epochs.
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    /// Hidden bottleneck width.
    pub hidden: usize,
    /// Insert a tanh between the two maps (sensitivity analysis only).
    pub nonlinear: bool,
    /// Fraction held out for evaluation; `None` evaluates on the training
    /// set itself, the default protocol.
    pub heldout_fraction: Option<f64>,
    pub control_mode: ControlMode,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 400,
            learning_rate: 1e-2,
            plateau_patience: 30,
            plateau_tolerance: 1e-7,
            hidden: 4,
            nonlinear: false,
            heldout_fraction: None,
            control_mode: ControlMode::PerExample,
            seed: 0,
        }
    }
}

/// Accuracy summary for one (location, target) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub location: Location,
    pub target: ProbeTarget,
    pub task_accuracy: f64,
    pub control_accuracy: f64,
    pub selectivity: f64,
}

/// Activations for a whole dataset: one matrix per grid location, plus the
/// per-example probe targets read off the reference algorithm.
#[derive(Debug, Clone)]
pub struct ActivationDataset {
    pub locations: Vec<Location>,
    /// `matrices[i]` is (n_examples × width), aligned with `locations[i]`.
    pub matrices: Vec<Array2<f64>>,
    /// 0 = forward, 1 = reverse.
    pub lexrel_targets: Vec<usize>,
    pub infer_targets: Vec<usize>,
    pub hyponyms: Vec<String>,
    /// Fraction of examples the model itself classifies correctly.
    pub model_accuracy: f64,
}

impl ActivationDataset {
    pub fn len(&self) -> usize {
        self.lexrel_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lexrel_targets.is_empty()
    }

    pub fn matrix(&self, loc: Location) -> &Array2<f64> {
        &self.matrices[loc.index()]
    }

    pub fn targets(&self, target: ProbeTarget) -> &[usize] {
        match target {
            ProbeTarget::Lexrel => &self.lexrel_targets,
            ProbeTarget::InferOutput => &self.infer_targets,
        }
    }
}

fn relation_bit(rel: LexicalRelation) -> usize {
    match rel {
        LexicalRelation::Forward => 0,
        _ => 1,
    }
}

/// Runs the model over a dataset, storing one vector per (example, location)
/// and the oracle-derived targets.
pub fn collect_activations(
    model: &InstrumentedModel,
    dataset: &[NLIExample],
) -> Result<ActivationDataset, ProbeError> {
    if dataset.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let locations = model.locations();
    let width = model.config().width;
    let n = dataset.len();

    let runs: Vec<_> = dataset
        .par_iter()
        .map(|ex| {
            let (label, record) = model.forward(ex)?;
            let state = oracle::infer_state(ex)?;
            Ok::<_, ProbeError>((record, label == ex.label, state))
        })
        .collect::<Result<_, _>>()?;

    let mut matrices: Vec<Array2<f64>> = locations
        .iter()
        .map(|_| Array2::zeros((n, width)))
        .collect();
    let mut lexrel_targets = Vec::with_capacity(n);
    let mut infer_targets = Vec::with_capacity(n);
    let mut correct = 0usize;
    for (i, (record, is_correct, state)) in runs.iter().enumerate() {
        for loc in &locations {
            matrices[loc.index()].row_mut(i).assign(record.vector(*loc));
        }
        lexrel_targets.push(relation_bit(state.lexrel));
        infer_targets.push(relation_bit(state.output));
        correct += usize::from(*is_correct);
    }

    Ok(ActivationDataset {
        locations,
        matrices,
        lexrel_targets,
        infer_targets,
        hyponyms: dataset.iter().map(|e| e.hyponym().to_string()).collect(),
        model_accuracy: correct as f64 / n as f64,
    })
}

/// Control labels for a task: fixed under the task seed across retrainings.
pub fn control_labels(task: &ProbeTask, hyponyms: &[String], mode: ControlMode) -> Vec<usize> {
    match mode {
        ControlMode::PerExample => {
            let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
            (0..hyponyms.len()).map(|_| rng.gen_range(0..2)).collect()
        }
        ControlMode::PerHyponym => {
            let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
            hyponyms
                .iter()
                .map(|h| {
                    *assignment.entry(h.as_str()).or_insert_with(|| {
                        let mut hasher = std::collections::hash_map::DefaultHasher::new();
                        task.seed.hash(&mut hasher);
                        h.hash(&mut hasher);
                        (hasher.finish() & 1) as usize
                    })
                })
                .collect()
        }
    }
}

/// The trained probe: a rank-bottlenecked linear classifier.
#[derive(Debug, Clone)]
pub struct Probe {
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
    nonlinear: bool,
}

impl Probe {
    fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.w1) + &self.b1;
        if self.nonlinear {
            h.mapv_inplace(f64::tanh);
        }
        h.dot(&self.w2) + &self.b2
    }

    /// Predicted class per row.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .axis_iter(Axis(0))
            .map(|row| usize::from(row[1] > row[0]))
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, targets: &[usize]) -> f64 {
        let preds = self.predict(x);
        let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
        hits as f64 / targets.len() as f64
    }
}

fn mean_ce_and_grad(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = targets.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = [logits[[i, 0]], logits[[i, 1]]];
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let z = e0 + e1;
        loss += (z.ln() + m) - row[t];
        dlogits[[i, 0]] = (e0 / z - if t == 0 { 1.0 } else { 0.0 }) / n;
        dlogits[[i, 1]] = (e1 / z - if t == 1 { 1.0 } else { 0.0 }) / n;
    }
    (loss / n, dlogits)
}

/// Trains one probe by full-batch gradient descent with adaptive step sizes,
/// stopping on the epoch cap or a training-loss plateau. Returns the probe
/// and its accuracy on the configured evaluation set.
pub fn train_probe(
    activations: &Array2<f64>,
    targets: &[usize],
    config: &ProbeConfig,
) -> Result<(Probe, f64), ProbeError> {
    if activations.nrows() != targets.len() {
        return Err(ProbeError::ShapeMismatch {
            rows: activations.nrows(),
            targets: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let ones = targets.iter().filter(|&&t| t == 1).count();
    if ones == 0 || ones == targets.len() {
        return Err(ProbeError::DegenerateTargets);
    }

    // Optional held-out split, seeded and deterministic.
    let n = targets.len();
    let (train_idx, eval_idx): (Vec<usize>, Vec<usize>) = match config.heldout_fraction {
        None => ((0..n).collect(), (0..n).collect()),
        Some(frac) => {
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37));
            let cut = (((n as f64) * frac).ceil() as usize).clamp(1, n - 1);
            let (eval, train) = order.split_at(cut);
            (train.to_vec(), eval.to_vec())
        }
    };
    let select = |idx: &[usize]| -> (Array2<f64>, Vec<usize>) {
        let mut m = Array2::zeros((idx.len(), activations.ncols()));
        let mut t = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            m.row_mut(row).assign(&activations.row(i));
            t.push(targets[i]);
        }
        (m, t)
    };
    let (x_train, t_train) = select(&train_idx);
    let (x_eval, t_eval) = select(&eval_idx);

    let d = activations.ncols();
    let h = config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let a1 = (6.0 / (d + h) as f64).sqrt();
    let a2 = (6.0 / (h + 2) as f64).sqrt();
    let mut params = vec![
        Array2::from_shape_fn((d, h), |_| rng.gen_range(-a1..=a1)),
        Array2::zeros((1, h)),
        Array2::from_shape_fn((h, 2), |_| rng.gen_range(-a2..=a2)),
        Array2::zeros((1, 2)),
    ];
    let mut adam = Adam::new(&params, config.learning_rate);

    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..config.epochs {
        let mut hmat = x_train.dot(&params[0]) + &params[1];
        if config.nonlinear {
            hmat.mapv_inplace(f64::tanh);
        }
        let logits = hmat.dot(&params[2]) + &params[3];
        let (loss, dlogits) = mean_ce_and_grad(&logits, &t_train);

        let mut dh = dlogits.dot(&params[2].t());
        if config.nonlinear {
            dh = &dh * &hmat.mapv(|t| 1.0 - t * t);
        }
        let grads = vec![
            x_train.t().dot(&dh),
            dh.sum_axis(Axis(0)).insert_axis(Axis(0)),
            hmat.t().dot(&dlogits),
            dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)),
        ];
        adam.step(&mut params, &grads);

        if best_loss - loss > config.plateau_tolerance {
            best_loss = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.plateau_patience {
                break;
            }
        }
    }

    let b2 = params.pop().unwrap();
    let w2 = params.pop().unwrap();
    let b1 = params.pop().unwrap();
    let w1 = params.pop().unwrap();
    let probe = Probe {
        w1,
        b1,
        w2,
        b2,
        nonlinear: config.nonlinear,
    };
    let accuracy = probe.accuracy(&x_eval, &t_eval);
    Ok((probe, accuracy))
}

/// Trains a task probe and its control twin at every grid location, for
/// every requested task, and reports accuracies and selectivity.
pub fn selectivity_sweep(
    model: &InstrumentedModel,
    dataset: &[NLIExample],
    tasks: &[ProbeTask],
    config: &ProbeConfig,
) -> Result<Vec<ProbeReport>, ProbeError> {
    let activations = collect_activations(model, dataset)?;
    selectivity_sweep_on(&activations, tasks, config)
}

/// Sweep over prepared activations; probes at different locations train
/// concurrently, each internally sequential and seeded.
pub fn selectivity_sweep_on(
    activations: &ActivationDataset,
    tasks: &[ProbeTask],
    config: &ProbeConfig,
) -> Result<Vec<ProbeReport>, ProbeError> {
    let mut cells = Vec::new();
    for task in tasks {
        for loc in &activations.locations {
            cells.push((*loc, *task));
        }
    }
    cells
        .par_iter()
        .map(|(loc, task)| {
            let x = activations.matrix(*loc);
            let gold = activations.targets(task.target);
            let control = control_labels(task, &activations.hyponyms, config.control_mode);
            let (_, task_accuracy) = train_probe(x, gold, config)?;
            let (_, control_accuracy) = train_probe(x, &control, config)?;
            Ok(ProbeReport {
                location: *loc,
                target: task.target,
                task_accuracy,
                control_accuracy,
                selectivity: task_accuracy - control_accuracy,
            })
        })
        .collect()
}

/// Writes reports as `location_row,location_role,target,task_accuracy,
/// control_accuracy,selectivity` CSV.
pub fn write_probe_csv(path: impl AsRef<Path>, reports: &[ProbeReport]) -> Result<(), ProbeError> {
    let mut out = String::from(
        "location_row,location_role,target,task_accuracy,control_accuracy,selectivity\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.location.row,
            r.location.role,
            r.target,
            r.task_accuracy,
            r.control_accuracy,
            r.selectivity
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
