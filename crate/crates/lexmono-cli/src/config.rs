//! Declarative experiment configuration.
//!
//! Every field has a default, so an empty file is a valid experiment. The
//! fully-resolved config is written into the run directory, and each stage's
//! checksum covers exactly the config slices and upstream stages it depends
//! on, so editing one section invalidates only the stages downstream of it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const OUT_ROOT_ENV: &str = "LEXMONO_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; per-stage seeds are derived from it deterministically.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub inoculate: InoculateSection,
    pub probe: ProbeSection,
    pub intervene: InterveneSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            inoculate: InoculateSection::default(),
            probe: ProbeSection::default(),
            intervene: InterveneSection::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Lexicon file; empty means the bundled default.
    pub lexicon: PathBuf,
    /// Template file; empty means the bundled default.
    pub templates: PathBuf,
    pub polarity: String,
    pub iid_test_fraction: f64,
    pub challenge_test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            lexicon: PathBuf::new(),
            templates: PathBuf::new(),
            polarity: "both".into(),
            iid_test_fraction: 0.2,
            challenge_test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub rows: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            rows: 4,
            width: 64,
            heads: 4,
            max_len: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InoculateSection {
    /// Fine-tuning amounts; 0 is the no-op baseline point.
    pub amounts: Vec<usize>,
    /// Additionally fine-tune on the whole challenge train set.
    pub amount_all: bool,
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_size: usize,
}

impl Default for InoculateSection {
    fn default() -> Self {
        InoculateSection {
            amounts: vec![0, 50, 100, 200, 400],
            amount_all: true,
            learning_rates: vec![1e-3, 3e-4, 1e-4],
            epochs: vec![8],
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub nonlinear: bool,
    /// 0 evaluates probes on their training set, the default protocol.
    pub heldout_fraction: f64,
    pub control_mode: String,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            epochs: 400,
            learning_rate: 1e-2,
            hidden: 4,
            nonlinear: false,
            heldout_fraction: 0.0,
            control_mode: "per_example".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneSection {
    /// Upper bound on the intervention example subset.
    pub max_examples: usize,
    /// Interchange budget per location when ranking locations.
    pub location_budget: usize,
    pub alpha_min: u32,
    pub alpha_max: u32,
    /// Pin the sweep location (e.g. "wh3"); empty ranks and picks the best.
    pub location: String,
}

impl Default for InterveneSection {
    fn default() -> Self {
        InterveneSection {
            max_examples: 320,
            location_budget: 400,
            alpha_min: 1,
            alpha_max: 10,
            location: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Worker threads for intra-stage parallelism; 0 uses the runtime
    /// default.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { workers: 0 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.data.iid_test_fraction;
        anyhow::ensure!(
            f > 0.0 && f < 1.0,
            "data.iid_test_fraction must lie in (0,1), got {f}"
        );
        let f = self.data.challenge_test_fraction;
        anyhow::ensure!(
            f > 0.0 && f < 1.0,
            "data.challenge_test_fraction must lie in (0,1), got {f}"
        );
        anyhow::ensure!(
            matches!(self.data.polarity.as_str(), "positive" | "negated" | "both"),
            "data.polarity must be positive|negated|both, got {:?}",
            self.data.polarity
        );
        anyhow::ensure!(
            self.model.width > 0
                && self.model.heads > 0
                && self.model.width % self.model.heads == 0,
            "model.width must be a positive multiple of model.heads"
        );
        anyhow::ensure!(self.model.rows >= 1, "model.rows must be at least 1");
        anyhow::ensure!(
            self.intervene.alpha_min >= 1 && self.intervene.alpha_min <= self.intervene.alpha_max,
            "intervene alpha range must satisfy 1 <= alpha_min <= alpha_max"
        );
        anyhow::ensure!(
            matches!(self.probe.control_mode.as_str(), "per_example" | "per_hyponym"),
            "probe.control_mode must be per_example|per_hyponym"
        );
        anyhow::ensure!(
            !self.inoculate.amounts.is_empty() || self.inoculate.amount_all,
            "inoculate needs at least one amount"
        );
        Ok(())
    }

    /// Applies the output-root environment variable to a relative out_dir.
    pub fn resolve_out_dir(&mut self) {
        if self.out_dir.is_relative() {
            if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
                if !root.is_empty() {
                    self.out_dir = PathBuf::from(root).join(&self.out_dir);
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    /// Checksum of the whole resolved config.
    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Per-stage seed derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(stage.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
    }

    /// Checksum of one stage: its config slice plus its upstream stages'
    /// checksums, so upstream changes cascade.
    pub fn stage_checksum(&self, stage: &str, upstream: &[&str]) -> Result<String> {
        let slice = match stage {
            "gen" => toml::to_string(&self.data)?,
            "train" => format!(
                "{}{}",
                toml::to_string(&self.model)?,
                toml::to_string(&self.train)?
            ),
            "eval" => String::new(),
            "inoculate" => toml::to_string(&self.inoculate)?,
            "probe" => toml::to_string(&self.probe)?,
            "intervene" => toml::to_string(&self.intervene)?,
            "report" => String::new(),
            other => anyhow::bail!("unknown stage {other:?}"),
        };
        let mut hasher = Sha256::new();
        hasher.update(stage.as_bytes());
        hasher.update([0]);
        hasher.update(self.seed.to_le_bytes());
        hasher.update(slice.as_bytes());
        for up in upstream {
            hasher.update([0]);
            hasher.update(up.as_bytes());
        }
        Ok(hex(&hasher.finalize()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let config: ExperimentConfig = toml::from_str("").unwrap();
        config.validate().unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.model.rows, 4);
        assert!(config.inoculate.amount_all);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("mystery = 1\n").unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let config = ExperimentConfig::default();
        assert_eq!(config.stage_seed("gen"), config.stage_seed("gen"));
        assert_ne!(config.stage_seed("gen"), config.stage_seed("train"));
    }

    #[test]
    fn stage_checksum_tracks_only_its_slice() {
        let base = ExperimentConfig::default();
        let mut probe_changed = base.clone();
        probe_changed.probe.epochs += 1;
        // gen unaffected by a probe change...
        assert_eq!(
            base.stage_checksum("gen", &[]).unwrap(),
            probe_changed.stage_checksum("gen", &[]).unwrap()
        );
        // ...but the probe stage itself flips.
        assert_ne!(
            base.stage_checksum("probe", &["x"]).unwrap(),
            probe_changed.stage_checksum("probe", &["x"]).unwrap()
        );
        // Upstream checksums cascade.
        assert_ne!(
            base.stage_checksum("probe", &["a"]).unwrap(),
            base.stage_checksum("probe", &["b"]).unwrap()
        );
    }

    #[test]
    fn seed_changes_every_stage_checksum() {
        let base = ExperimentConfig::default();
        let mut reseeded = base.clone();
        reseeded.seed = 7;
        assert_ne!(
            base.stage_checksum("gen", &[]).unwrap(),
            reseeded.stage_checksum("gen", &[]).unwrap()
        );
    }
}
