//! The experiment pipeline: gen → train → eval → inoculate → probe →
//! intervene → report. Each stage reads its inputs from the run directory,
//! writes its artifacts back, and is recorded in the manifest with the
//! checksum of exactly the config it depends on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use lexmono::data::{write_jsonl, NLIExample};
use lexmono::datagen::{
    self, generate, ingest_external, split_random, split_systematic, Polarity, Template,
};
use lexmono::intervene::{
    build_graph, causal_clustering_score, choose_location, expected_cliques,
    greedy_clique_alpha_sweep, verify_clique, CliqueReport, InterveneError, ModelSubject,
    SweepRunner,
};
use lexmono::lexicon::Lexicon;
use lexmono::model::{
    inoculate, train, InoculationGrid, InstrumentedModel, Location, ModelConfig, Role,
    TrainHyperparams, Vocab,
};
use lexmono::probe::{
    selectivity_sweep, write_probe_csv, ControlMode, ProbeConfig, ProbeTarget, ProbeTask,
};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub const STAGE_ORDER: [&str; 7] = [
    "gen",
    "train",
    "eval",
    "inoculate",
    "probe",
    "intervene",
    "report",
];

fn upstream(stage: &str) -> &'static [&'static str] {
    match stage {
        "gen" => &[],
        "train" => &["gen"],
        "eval" => &["train"],
        "inoculate" => &["train"],
        "probe" => &["inoculate"],
        "intervene" => &["inoculate"],
        "report" => &["eval", "inoculate", "probe", "intervene"],
        _ => &[],
    }
}

/// Checksums for every stage, chained through their upstream stages.
pub fn stage_checksums(config: &ExperimentConfig) -> Result<BTreeMap<String, String>> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    for stage in STAGE_ORDER {
        let ups: Vec<&str> = upstream(stage)
            .iter()
            .map(|u| out.get(*u).map(String::as_str).expect("topological order"))
            .collect();
        let checksum = config.stage_checksum(stage, &ups)?;
        out.insert(stage.to_string(), checksum);
    }
    Ok(out)
}

pub struct StageOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Runs the requested stages in dependency order, skipping fresh ones unless
/// forced. The manifest is saved after every completed stage, so a failure
/// leaves partial completion recorded.
pub fn run_stages(
    config: &ExperimentConfig,
    run_dir: &Path,
    requested: &[String],
    force: bool,
) -> Result<StageOutcome> {
    for stage in requested {
        if !STAGE_ORDER.contains(&stage.as_str()) {
            bail!("unknown stage {stage:?}; valid stages: {}", STAGE_ORDER.join(", "));
        }
    }
    std::fs::create_dir_all(run_dir)
        .with_context(|| format!("creating run dir {}", run_dir.display()))?;

    // The resolved config is the reproducibility anchor for the whole run.
    std::fs::write(run_dir.join("config.toml"), config.to_toml()?)
        .context("writing resolved config")?;

    let checksums = stage_checksums(config)?;
    let mut manifest = RunManifest::load(run_dir)?;
    manifest.config_checksum = config.checksum()?;

    let mut outcome = StageOutcome {
        executed: Vec::new(),
        skipped: Vec::new(),
    };

    for stage in STAGE_ORDER {
        if !requested.iter().any(|s| s == stage) {
            continue;
        }
        let checksum = &checksums[stage];
        if !force && manifest.is_fresh(run_dir, stage, checksum) {
            println!("[{stage}] up to date, skipping");
            outcome.skipped.push(stage.to_string());
            continue;
        }
        for up in upstream(stage) {
            let fresh = manifest.is_fresh(run_dir, up, &checksums[*up]);
            // The report tolerates a missing intervention stage.
            if !fresh && !(stage == "report" && *up == "intervene") {
                bail!(
                    "stage {stage:?} requires {up:?}, which is stale or missing; \
                     include it in the requested stages or rerun with it"
                );
            }
        }
        println!("[{stage}] running");
        let started = Instant::now();
        let artifacts = match stage {
            "gen" => stage_gen(config, run_dir)?,
            "train" => stage_train(config, run_dir)?,
            "eval" => stage_eval(config, run_dir)?,
            "inoculate" => stage_inoculate(config, run_dir)?,
            "probe" => stage_probe(config, run_dir)?,
            "intervene" => stage_intervene(config, run_dir)?,
            "report" => stage_report(config, run_dir)?,
            _ => unreachable!(),
        };
        let wall_ms = started.elapsed().as_millis();
        println!("[{stage}] done in {:.1}s", wall_ms as f64 / 1000.0);
        manifest.record(stage, checksum.clone(), wall_ms, artifacts);
        manifest.save(run_dir)?;
        outcome.executed.push(stage.to_string());
    }
    Ok(outcome)
}

// --------------------------------------------------------------------------
// shared loading helpers
// --------------------------------------------------------------------------

fn load_lexicon(run_dir: &Path) -> Result<Lexicon> {
    Lexicon::load(run_dir.join("data/lexicon.txt")).map_err(|e| anyhow!(e))
}

fn load_dataset(run_dir: &Path, rel: &str) -> Result<Vec<NLIExample>> {
    let lexicon = load_lexicon(run_dir)?;
    let path = run_dir.join(rel);
    let ingested = ingest_external(&path, &lexicon)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    if !ingested.label_mismatches.is_empty() {
        bail!(
            "dataset {} holds {} label(s) disagreeing with the reference algorithm",
            path.display(),
            ingested.label_mismatches.len()
        );
    }
    Ok(ingested.examples)
}

fn load_corpus(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<NLIExample>> {
    let mut corpus = Vec::new();
    if config.data.polarity != "negated" {
        corpus.extend(load_dataset(run_dir, "data/positive.jsonl")?);
    }
    if config.data.polarity != "positive" {
        corpus.extend(load_dataset(run_dir, "data/negated.jsonl")?);
    }
    Ok(corpus)
}

fn load_model(run_dir: &Path, rel: &str) -> Result<InstrumentedModel> {
    InstrumentedModel::load(run_dir.join(rel))
        .with_context(|| format!("loading checkpoint {rel}"))
        .map_err(|e| anyhow!(e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("missing artifact {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_location(text: &str) -> Option<Location> {
    let split = text.find(|c: char| c.is_ascii_digit())?;
    let role = match &text[..split] {
        "cls" => Role::Cls,
        "wp" => Role::Wp,
        "wh" => Role::Wh,
        _ => return None,
    };
    let row: usize = text[split..].parse().ok()?;
    Some(Location::new(row, role))
}

// --------------------------------------------------------------------------
// gen
// --------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GenSummary {
    positive: usize,
    negated: usize,
    entailment: usize,
    neutral: usize,
    iid_train: usize,
    iid_test: usize,
    challenge_train: usize,
    challenge_test: usize,
}

pub fn stage_gen(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let data_dir = run_dir.join("data");
    std::fs::create_dir_all(&data_dir)?;

    // Materialize inputs into the run dir so it is self-contained.
    let lexicon_text = if config.data.lexicon.as_os_str().is_empty() {
        datagen::DEFAULT_LEXICON.to_string()
    } else {
        std::fs::read_to_string(&config.data.lexicon)
            .with_context(|| format!("reading lexicon {}", config.data.lexicon.display()))?
    };
    std::fs::write(data_dir.join("lexicon.txt"), &lexicon_text)?;
    let template_text = if config.data.templates.as_os_str().is_empty() {
        datagen::DEFAULT_TEMPLATES.to_string()
    } else {
        std::fs::read_to_string(&config.data.templates)
            .with_context(|| format!("reading templates {}", config.data.templates.display()))?
    };
    std::fs::write(data_dir.join("templates.txt"), &template_text)?;

    let lexicon = Lexicon::parse(&lexicon_text).map_err(|e| anyhow!(e))?;
    let templates = Template::parse_file(&template_text).map_err(|e| anyhow!(e))?;
    let seed = config.stage_seed("gen");

    let mut artifacts = vec![
        PathBuf::from("data/lexicon.txt"),
        PathBuf::from("data/templates.txt"),
    ];
    let mut summary = GenSummary {
        positive: 0,
        negated: 0,
        entailment: 0,
        neutral: 0,
        iid_train: 0,
        iid_test: 0,
        challenge_train: 0,
        challenge_test: 0,
    };

    if config.data.polarity != "negated" {
        let positive = generate(&templates, &lexicon, Polarity::Positive).map_err(|e| anyhow!(e))?;
        summary.positive = positive.len();
        summary.entailment += count_label(&positive, true);
        summary.neutral += count_label(&positive, false);
        write_jsonl(data_dir.join("positive.jsonl"), &positive)?;
        artifacts.push(PathBuf::from("data/positive.jsonl"));

        let split = split_random(&positive, config.data.iid_test_fraction, seed)
            .map_err(|e| anyhow!(e))?;
        summary.iid_train = split.train.len();
        summary.iid_test = split.test.len();
        write_jsonl(data_dir.join("iid_train.jsonl"), &split.train)?;
        write_jsonl(data_dir.join("iid_test.jsonl"), &split.test)?;
        split
            .manifest
            .write_csv(data_dir.join("iid_split_manifest.csv"))?;
        artifacts.extend([
            PathBuf::from("data/iid_train.jsonl"),
            PathBuf::from("data/iid_test.jsonl"),
            PathBuf::from("data/iid_split_manifest.csv"),
        ]);
    }

    if config.data.polarity != "positive" {
        let negated = generate(&templates, &lexicon, Polarity::Negated).map_err(|e| anyhow!(e))?;
        summary.negated = negated.len();
        summary.entailment += count_label(&negated, true);
        summary.neutral += count_label(&negated, false);
        write_jsonl(data_dir.join("negated.jsonl"), &negated)?;
        artifacts.push(PathBuf::from("data/negated.jsonl"));

        let split = split_systematic(&negated, config.data.challenge_test_fraction, seed)
            .map_err(|e| anyhow!(e))?;
        summary.challenge_train = split.train.len();
        summary.challenge_test = split.test.len();
        write_jsonl(data_dir.join("challenge_train.jsonl"), &split.train)?;
        write_jsonl(data_dir.join("challenge_test.jsonl"), &split.test)?;
        split
            .manifest
            .write_csv(data_dir.join("challenge_split_manifest.csv"))?;
        artifacts.extend([
            PathBuf::from("data/challenge_train.jsonl"),
            PathBuf::from("data/challenge_test.jsonl"),
            PathBuf::from("data/challenge_split_manifest.csv"),
        ]);
    }

    write_json(&data_dir.join("gen_summary.json"), &summary)?;
    artifacts.push(PathBuf::from("data/gen_summary.json"));
    println!(
        "  {} positive + {} negated examples ({} entailment / {} neutral)",
        summary.positive, summary.negated, summary.entailment, summary.neutral
    );
    println!(
        "  iid split {}/{}; challenge split {}/{} (hyponym-disjoint)",
        summary.iid_train, summary.iid_test, summary.challenge_train, summary.challenge_test
    );
    Ok(artifacts)
}

fn count_label(examples: &[NLIExample], entailment: bool) -> usize {
    examples
        .iter()
        .filter(|e| (e.label == lexmono::Label::Entailment) == entailment)
        .count()
}

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

pub fn stage_train(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let model_dir = run_dir.join("model");
    std::fs::create_dir_all(&model_dir)?;

    let corpus = load_corpus(config, run_dir)?;
    let vocab = Vocab::build(corpus.iter());
    let train_set = load_dataset(run_dir, "data/iid_train.jsonl")?;
    let test_set = load_dataset(run_dir, "data/iid_test.jsonl")?;

    let model_config = ModelConfig {
        rows: config.model.rows,
        width: config.model.width,
        heads: config.model.heads,
        max_len: config.model.max_len,
        vocab,
        seed: config.stage_seed("train"),
    };
    let hp = TrainHyperparams {
        learning_rate: config.train.learning_rate,
        batch_size: config.train.batch_size,
        epochs: config.train.epochs,
        seed: config.stage_seed("train") ^ 0x5eed,
        class_weights: None,
    };
    let (model, mut report) = train(&model_config, &train_set, &hp).map_err(|e| anyhow!(e))?;
    let test_accuracy = model.evaluate(&test_set).map_err(|e| anyhow!(e))?;
    report
        .eval_accuracies
        .push(("iid_test".to_string(), test_accuracy));

    model.save(model_dir.join("base.ckpt")).map_err(|e| anyhow!(e))?;
    write_json(&model_dir.join("base_report.json"), &report)?;
    println!(
        "  trained {} epochs; train acc {:.3}, iid test acc {:.3}",
        report.epochs_run, report.final_train_accuracy, test_accuracy
    );
    Ok(vec![
        PathBuf::from("model/base.ckpt"),
        PathBuf::from("model/base_report.json"),
    ])
}

// --------------------------------------------------------------------------
// eval (challenge evaluation of the base model)
// --------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct BaseAccuracy {
    pub iid_test: f64,
    pub negated_all: f64,
    pub challenge_train_side: f64,
    pub challenge_test_side: f64,
}

pub fn stage_eval(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    if config.data.polarity == "positive" {
        bail!("challenge evaluation needs negated data; set data.polarity to \"both\"");
    }
    let eval_dir = run_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;

    let model = load_model(run_dir, "model/base.ckpt")?;
    let iid_test = load_dataset(run_dir, "data/iid_test.jsonl")?;
    let negated = load_dataset(run_dir, "data/negated.jsonl")?;
    let challenge_train = load_dataset(run_dir, "data/challenge_train.jsonl")?;
    let challenge_test = load_dataset(run_dir, "data/challenge_test.jsonl")?;

    let accuracy = BaseAccuracy {
        iid_test: model.evaluate(&iid_test).map_err(|e| anyhow!(e))?,
        negated_all: model.evaluate(&negated).map_err(|e| anyhow!(e))?,
        challenge_train_side: model.evaluate(&challenge_train).map_err(|e| anyhow!(e))?,
        challenge_test_side: model.evaluate(&challenge_test).map_err(|e| anyhow!(e))?,
    };
    write_json(&eval_dir.join("base_accuracy.json"), &accuracy)?;
    println!(
        "  base model: iid {:.3}, negated (all) {:.3}",
        accuracy.iid_test, accuracy.negated_all
    );
    Ok(vec![PathBuf::from("eval/base_accuracy.json")])
}

// --------------------------------------------------------------------------
// inoculate
// --------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct InoculationSummary {
    pub amount: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub original_accuracy: f64,
    pub challenge_accuracy: f64,
    pub negated_all_accuracy: f64,
}

pub fn stage_inoculate(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let model_dir = run_dir.join("model");
    let base = load_model(run_dir, "model/base.ckpt")?;
    let iid_test = load_dataset(run_dir, "data/iid_test.jsonl")?;
    let challenge_train = load_dataset(run_dir, "data/challenge_train.jsonl")?;
    let challenge_test = load_dataset(run_dir, "data/challenge_test.jsonl")?;
    let negated = load_dataset(run_dir, "data/negated.jsonl")?;

    let mut amounts: Vec<usize> = config
        .inoculate
        .amounts
        .iter()
        .copied()
        .filter(|&a| a <= challenge_train.len())
        .collect();
    if config.inoculate.amount_all {
        amounts.push(challenge_train.len());
    }
    amounts.sort_unstable();
    amounts.dedup();
    anyhow::ensure!(!amounts.is_empty(), "no feasible inoculation amounts");

    let grid = InoculationGrid {
        learning_rates: config.inoculate.learning_rates.clone(),
        epochs: config.inoculate.epochs.clone(),
        batch_size: config.inoculate.batch_size,
        seed: config.stage_seed("inoculate"),
    };
    let outcome = inoculate(
        &base,
        &iid_test,
        &challenge_train,
        &challenge_test,
        &amounts,
        &grid,
    )
    .map_err(|e| anyhow!(e))?;

    let mut csv = String::from(
        "amount,learning_rate,epochs,original_accuracy,challenge_accuracy,mean_accuracy,selected\n",
    );
    for point in &outcome.curve {
        let selected = point.amount == outcome.selected.amount
            && point.learning_rate == outcome.selected.learning_rate
            && point.epochs == outcome.selected.epochs;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            point.amount,
            point.learning_rate,
            point.epochs,
            point.original_accuracy,
            point.challenge_accuracy,
            point.mean_accuracy(),
            selected
        ));
    }
    std::fs::write(model_dir.join("inoculation_curve.csv"), csv)?;

    let negated_all_accuracy = outcome.model.evaluate(&negated).map_err(|e| anyhow!(e))?;
    let summary = InoculationSummary {
        amount: outcome.selected.amount,
        learning_rate: outcome.selected.learning_rate,
        epochs: outcome.selected.epochs,
        original_accuracy: outcome.selected.original_accuracy,
        challenge_accuracy: outcome.selected.challenge_accuracy,
        negated_all_accuracy,
    };
    write_json(&model_dir.join("inoculation_selected.json"), &summary)?;
    outcome
        .model
        .save(model_dir.join("inoculated.ckpt"))
        .map_err(|e| anyhow!(e))?;
    println!(
        "  selected amount {} (lr {}, {} epochs): original {:.3}, disjoint challenge {:.3}",
        summary.amount,
        summary.learning_rate,
        summary.epochs,
        summary.original_accuracy,
        summary.challenge_accuracy
    );
    Ok(vec![
        PathBuf::from("model/inoculated.ckpt"),
        PathBuf::from("model/inoculation_curve.csv"),
        PathBuf::from("model/inoculation_selected.json"),
    ])
}

// --------------------------------------------------------------------------
// probe
// --------------------------------------------------------------------------

pub fn stage_probe(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let probe_dir = run_dir.join("probe");
    std::fs::create_dir_all(&probe_dir)?;

    let model = load_model(run_dir, "model/inoculated.ckpt")?;
    let corpus = load_corpus(config, run_dir)?;

    let seed = config.stage_seed("probe");
    let tasks = [
        ProbeTask {
            target: ProbeTarget::Lexrel,
            control: false,
            seed,
        },
        ProbeTask {
            target: ProbeTarget::InferOutput,
            control: false,
            seed: seed ^ 1,
        },
    ];
    let probe_config = ProbeConfig {
        epochs: config.probe.epochs,
        learning_rate: config.probe.learning_rate,
        hidden: config.probe.hidden,
        nonlinear: config.probe.nonlinear,
        heldout_fraction: if config.probe.heldout_fraction > 0.0 {
            Some(config.probe.heldout_fraction)
        } else {
            None
        },
        control_mode: if config.probe.control_mode == "per_hyponym" {
            ControlMode::PerHyponym
        } else {
            ControlMode::PerExample
        },
        seed,
        ..ProbeConfig::default()
    };

    let reports = selectivity_sweep(&model, &corpus, &tasks, &probe_config).map_err(|e| anyhow!(e))?;
    write_probe_csv(probe_dir.join("probe_report.csv"), &reports).map_err(|e| anyhow!(e))?;

    let top_cls = reports
        .iter()
        .find(|r| {
            r.location == Location::new(config.model.rows, Role::Cls)
                && r.target == ProbeTarget::InferOutput
        })
        .map(|r| (r.task_accuracy, r.control_accuracy));
    if let Some((task, control)) = top_cls {
        println!("  top-row cls probe: task {task:.3}, control {control:.3}");
    }
    Ok(vec![PathBuf::from("probe/probe_report.csv")])
}

// --------------------------------------------------------------------------
// intervene
// --------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct InterveneSummary {
    pub location: String,
    pub examples: usize,
    pub edges: usize,
    pub causal_edges: usize,
    pub clustering_score: f64,
    pub cliques: Vec<CliqueSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CliqueSummary {
    pub alpha: u32,
    pub size: usize,
    pub causal_edges: usize,
    pub expected_random: f64,
}

pub fn stage_intervene(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join("intervene");
    std::fs::create_dir_all(&dir)?;

    let model = load_model(run_dir, "model/inoculated.ckpt")?;
    let mut corpus = load_corpus(config, run_dir)?;
    let seed = config.stage_seed("intervene");
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        corpus.shuffle(&mut rng);
    }
    corpus.truncate(config.intervene.max_examples);
    anyhow::ensure!(corpus.len() >= 4, "intervention subset too small");

    let subject = ModelSubject::new(&model, &corpus).map_err(|e| anyhow!(e))?;

    let ranking = choose_location(&subject, &corpus, config.intervene.location_budget, seed)
        .map_err(|e| anyhow!(e))?;
    let mut ranking_csv = String::from("rank,location_row,location_role,score\n");
    for (rank, (loc, score)) in ranking.iter().enumerate() {
        ranking_csv.push_str(&format!("{},{},{},{}\n", rank + 1, loc.row, loc.role, score));
    }
    std::fs::write(dir.join("location_ranking.csv"), ranking_csv)?;

    let location = if config.intervene.location.is_empty() {
        ranking[0].0
    } else {
        parse_location(&config.intervene.location).ok_or_else(|| {
            anyhow!(
                "bad intervene.location {:?}; use e.g. \"wh3\"",
                config.intervene.location
            )
        })?
    };

    let log_path = dir.join(format!("sweep_{location}.bin"));
    let data = match SweepRunner::open(&log_path, &subject, &corpus, location, None) {
        Ok(mut runner) => runner.run_to_end().map_err(|e| anyhow!(e))?,
        Err(InterveneError::LogMismatch(_)) => {
            // A stale log from an earlier configuration; start over.
            let _ = std::fs::remove_file(&log_path);
            let _ = std::fs::remove_file(dir.join(format!("sweep_{location}.bin.idx")));
            let mut runner = SweepRunner::open(&log_path, &subject, &corpus, location, None)
                .map_err(|e| anyhow!(e))?;
            runner.run_to_end().map_err(|e| anyhow!(e))?
        }
        Err(e) => return Err(anyhow!(e)),
    };

    let graph = build_graph(&data.results).map_err(|e| anyhow!(e))?;
    std::fs::write(
        dir.join("graph.dot"),
        graph.to_dot(|id| {
            corpus
                .get(id as usize)
                .map(|e| format!("{}:{}>{}", id, e.w_p, e.w_h))
                .unwrap_or_else(|| id.to_string())
        }),
    )?;

    let alphas = config.intervene.alpha_min..=config.intervene.alpha_max;
    let cliques: Vec<CliqueReport> = greedy_clique_alpha_sweep(&graph, alphas)
        .into_iter()
        .map(|mut c| {
            c.attach_hyponyms(&corpus);
            c
        })
        .collect();
    for clique in &cliques {
        anyhow::ensure!(
            verify_clique(&graph, &clique.members),
            "clique of size {} failed verification",
            clique.size
        );
    }
    lexmono::intervene::write_cliques_csv(dir.join("cliques.csv"), &cliques, &corpus)
        .map_err(|e| anyhow!(e))?;

    let n = graph.node_count() as u64;
    let summary = InterveneSummary {
        location: location.to_string(),
        examples: corpus.len(),
        edges: graph.edge_count(),
        causal_edges: graph.causal_edge_count(),
        clustering_score: causal_clustering_score(&graph),
        cliques: cliques
            .iter()
            .map(|c| {
                Ok(CliqueSummary {
                    alpha: c.alpha,
                    size: c.size,
                    causal_edges: c.causal_edges,
                    expected_random: expected_cliques(n, c.size as u64, 0.5)
                        .map_err(|e| anyhow!(e))?,
                })
            })
            .collect::<Result<_>>()?,
    };
    write_json(&dir.join("summary.json"), &summary)?;

    let best = summary.cliques.iter().map(|c| c.size).max().unwrap_or(0);
    println!(
        "  location {location}: {} edges ({} causal), largest clique {}",
        summary.edges, summary.causal_edges, best
    );
    Ok(vec![
        PathBuf::from("intervene/location_ranking.csv"),
        PathBuf::from(format!("intervene/sweep_{location}.bin")),
        PathBuf::from(format!("intervene/sweep_{location}.bin.idx")),
        PathBuf::from("intervene/graph.dot"),
        PathBuf::from("intervene/cliques.csv"),
        PathBuf::from("intervene/summary.json"),
    ])
}

// --------------------------------------------------------------------------
// report
// --------------------------------------------------------------------------

const PLOT_TEMPLATE: &str = r#"#!/usr/bin/env python3
"""Render the run's CSV artifacts as figures (matplotlib required)."""
import csv
import pathlib
import sys

import matplotlib.pyplot as plt

run = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else ".")

def rows(name):
    with open(run / name) as fh:
        return list(csv.DictReader(fh))

# Probe selectivity per location.
probe = rows("probe_report.csv")
for target in sorted({r["target"] for r in probe}):
    sub = [r for r in probe if r["target"] == target]
    labels = [f'{r["location_role"]}{r["location_row"]}' for r in sub]
    plt.figure(figsize=(10, 3))
    plt.bar(labels, [float(r["task_accuracy"]) for r in sub], label="task")
    plt.bar(labels, [float(r["control_accuracy"]) for r in sub], alpha=0.6, label="control")
    plt.axhline(0.5, ls=":", c="gray")
    plt.title(f"probe accuracy: {target}")
    plt.legend()
    plt.tight_layout()
    plt.savefig(run / f"probe_{target}.png", dpi=150)

# Inoculation curve.
curve = rows("inoculation_curve.csv")
amounts = sorted({int(r["amount"]) for r in curve})
best = {a: max((r for r in curve if int(r["amount"]) == a),
               key=lambda r: float(r["mean_accuracy"])) for a in amounts}
plt.figure(figsize=(6, 4))
plt.plot(amounts, [float(best[a]["original_accuracy"]) for a in amounts], "o-", label="original")
plt.plot(amounts, [float(best[a]["challenge_accuracy"]) for a in amounts], "s-", label="challenge")
plt.xlabel("fine-tuning amount")
plt.ylabel("accuracy")
plt.legend()
plt.tight_layout()
plt.savefig(run / "inoculation.png", dpi=150)
print("wrote figures to", run)
"#;

pub fn stage_report(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;

    let gen: GenSummary = read_json(&run_dir.join("data/gen_summary.json"))
        .map_err(|e| e.context("report requires the gen stage"))?;
    let base: BaseAccuracy = read_json(&run_dir.join("eval/base_accuracy.json"))
        .map_err(|e| e.context("report requires the eval stage"))?;
    let inoc: InoculationSummary = read_json(&run_dir.join("model/inoculation_selected.json"))
        .map_err(|e| e.context("report requires the inoculate stage"))?;

    let probe_src = run_dir.join("probe/probe_report.csv");
    anyhow::ensure!(
        probe_src.exists(),
        "report requires the probe stage (missing probe/probe_report.csv)"
    );

    // (a) behavioral accuracy table.
    let mut table = String::from("condition,dataset,accuracy\n");
    for (dataset, acc) in [
        ("iid_test", base.iid_test),
        ("negated_all", base.negated_all),
        ("challenge_train_side", base.challenge_train_side),
        ("challenge_test_side", base.challenge_test_side),
    ] {
        table.push_str(&format!("base,{dataset},{acc}\n"));
    }
    for (dataset, acc) in [
        ("iid_test", inoc.original_accuracy),
        ("negated_all", inoc.negated_all_accuracy),
        ("challenge_test_side", inoc.challenge_accuracy),
    ] {
        table.push_str(&format!("inoculated,{dataset},{acc}\n"));
    }
    std::fs::write(report_dir.join("table_accuracy.csv"), &table)?;

    // (b) and (c): copy the probe and inoculation CSVs next to the table.
    std::fs::copy(&probe_src, report_dir.join("probe_report.csv"))?;
    std::fs::copy(
        run_dir.join("model/inoculation_curve.csv"),
        report_dir.join("inoculation_curve.csv"),
    )?;

    // (d)/(e): intervention outputs are optional; note their absence.
    let intervene_summary: Option<InterveneSummary> =
        read_json(&run_dir.join("intervene/summary.json")).ok();
    if intervene_summary.is_some() {
        std::fs::copy(
            run_dir.join("intervene/cliques.csv"),
            report_dir.join("cliques.csv"),
        )?;
    }

    let mut summary = String::new();
    summary.push_str("experiment summary\n==================\n\n");
    summary.push_str(&format!(
        "data: {} positive + {} negated examples ({} entailment / {} neutral)\n",
        gen.positive, gen.negated, gen.entailment, gen.neutral
    ));
    summary.push_str(&format!(
        "splits: iid {}/{}, challenge (hyponym-disjoint) {}/{}\n\n",
        gen.iid_train, gen.iid_test, gen.challenge_train, gen.challenge_test
    ));
    summary.push_str("behavioral results\n------------------\n");
    summary.push_str(&format!(
        "base model:       iid {:.3}   negated(all) {:.3}   disjoint-test {:.3}\n",
        base.iid_test, base.negated_all, base.challenge_test_side
    ));
    summary.push_str(&format!(
        "inoculated model: iid {:.3}   negated(all) {:.3}   disjoint-test {:.3}\n",
        inoc.original_accuracy, inoc.negated_all_accuracy, inoc.challenge_accuracy
    ));
    summary.push_str(&format!(
        "selected fine-tuning: amount {}, lr {}, {} epochs\n\n",
        inoc.amount, inoc.learning_rate, inoc.epochs
    ));

    match &intervene_summary {
        Some(intervene) => {
            summary.push_str("intervention analysis\n---------------------\n");
            summary.push_str(&format!(
                "location {} over {} examples: {} edges, {} causal\n",
                intervene.location, intervene.examples, intervene.edges, intervene.causal_edges
            ));
            summary.push_str(
                "clique sizes against the G(n, 1/2) random baseline (expected count of \
                 same-size cliques):\n",
            );
            let mut cliques = intervene.cliques.clone();
            cliques.sort_by(|a, b| b.size.cmp(&a.size).then(a.alpha.cmp(&b.alpha)));
            for c in cliques.iter().take(12) {
                summary.push_str(&format!(
                    "  alpha {:>2}: size {:>4} ({} causal edges), expected {:.3e}\n",
                    c.alpha, c.size, c.causal_edges, c.expected_random
                ));
            }
        }
        None => {
            summary.push_str(
                "intervention analysis\n---------------------\n\
                 omitted: the intervene stage has not run for this configuration.\n",
            );
        }
    }
    summary.push_str(&format!(
        "\nartifacts: table_accuracy.csv, probe_report.csv, inoculation_curve.csv{}\n",
        if intervene_summary.is_some() {
            ", cliques.csv"
        } else {
            ""
        }
    ));
    summary.push_str(&format!("root seed: {}\n", config.seed));
    std::fs::write(report_dir.join("summary.txt"), &summary)?;
    std::fs::write(report_dir.join("plot.py"), PLOT_TEMPLATE)?;

    let mut artifacts = vec![
        PathBuf::from("report/table_accuracy.csv"),
        PathBuf::from("report/probe_report.csv"),
        PathBuf::from("report/inoculation_curve.csv"),
        PathBuf::from("report/summary.txt"),
        PathBuf::from("report/plot.py"),
    ];
    if intervene_summary.is_some() {
        artifacts.push(PathBuf::from("report/cliques.csv"));
    }
    print!("{summary}");
    Ok(artifacts)
}
