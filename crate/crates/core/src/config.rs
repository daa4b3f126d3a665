//! JSON experiment configuration.
//!
//! Only `model` and `dataset` are required; every other section falls back
//! to the defaults below. Unknown keys are rejected, and every error names
//! the offending field path.
//!
//! ```json
//! {
//!   "model": { "layer_sizes": [20, 64, 64, 10] },
//!   "dataset": { "synthetic": { "kind": "blobs", "classes": 10, "per_class": 200, "dim": 20 } },
//!   "federation": { "clients": 20, "rounds": 150, "batch_size": 64, "learning_rate": 0.001 },
//!   "participation": { "fraction": 1.0 },
//!   "pruning": { "mode": "iterative", "target_sparsity": 0.9, "cycles": 5 },
//!   "channel": { "snr_db": 10.0, "noise_enabled": true },
//!   "seed": 1
//! }
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, DEFAULT_SNR_DB};
use crate::data::{SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fed::{LocalTraining, ParticipationPolicy};
use crate::nn::{Activation, ModelSpec};
use crate::pruning::{PruningMode, PruningPlan};

pub const DEFAULT_CLIENTS: usize = 100;
pub const DEFAULT_ROUNDS: usize = 1000;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_CYCLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub participation: ParticipationConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Csv(CsvConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKindName {
    Blobs,
    Spirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKindName,
    pub classes: usize,
    pub per_class: usize,
    /// Feature dimension, blobs only.
    #[serde(default)]
    pub dim: Option<usize>,
    /// Gaussian jitter, spirals only.
    #[serde(default)]
    pub noise: Option<f64>,
    /// Defaults to the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    pub classes: usize,
    /// Held-out file; without it `path` is split 80/20.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub local_steps: Option<usize>,
    pub early_stop_accuracy: Option<f64>,
    /// Standardize features with train-set statistics.
    pub normalize: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: DEFAULT_CLIENTS,
            rounds: DEFAULT_ROUNDS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            local_steps: None,
            early_stop_accuracy: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticipationConfig {
    pub fraction: f64,
}

impl Default for ParticipationConfig {
    fn default() -> Self {
        ParticipationConfig { fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    pub mode: PruningMode,
    pub target_sparsity: f64,
    pub cycles: usize,
    /// One-shot pruning round; defaults to half the round budget.
    pub osp_round: Option<usize>,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            mode: PruningMode::None,
            target_sparsity: 0.0,
            cycles: DEFAULT_CYCLES,
            osp_round: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub snr_db: f64,
    pub noise_enabled: bool,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            snr_db: DEFAULT_SNR_DB,
            noise_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Rounds between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.synthetic_spec()?;
        if let DatasetSource::Csv(csv) = &self.dataset {
            if csv.classes < 2 {
                return Err(Error::config("dataset.csv.classes", "need at least 2 classes"));
            }
        }
        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::config("federation.clients", "must be positive"));
        }
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return Err(Error::config("federation.learning_rate", format!("must be positive, got {}", f.learning_rate)));
        }
        if f.batch_size == 0 {
            return Err(Error::config("federation.batch_size", "must be positive"));
        }
        if f.local_steps == Some(0) {
            return Err(Error::config("federation.local_steps", "must be positive"));
        }
        if let Some(a) = f.early_stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("federation.early_stop_accuracy", format!("must lie in [0, 1], got {a}")));
            }
        }
        let fraction = self.participation.fraction;
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config("participation.fraction", format!("must lie in (0, 1], got {fraction}")));
        }
        let p = &self.pruning;
        if !(0.0..1.0).contains(&p.target_sparsity) {
            return Err(Error::config(
                "pruning.target_sparsity",
                format!("must lie in [0, 1), got {}", p.target_sparsity),
            ));
        }
        if p.cycles == 0 {
            return Err(Error::config("pruning.cycles", "must be positive"));
        }
        self.pruning_plan()
            .map_err(|e| Error::config("pruning", e.to_string()))?;
        if !self.channel.snr_db.is_finite() {
            return Err(Error::config("channel.snr_db", "must be finite"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::with_activation(self.model.layer_sizes.clone(), self.model.activation)
            .map_err(|e| Error::config("model.layer_sizes", e.to_string()))
    }

    /// `None` for CSV-backed datasets.
    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>> {
        let DatasetSource::Synthetic(s) = &self.dataset else {
            return Ok(None);
        };
        let path = |field: &str| format!("dataset.synthetic.{field}");
        let kind = match s.kind {
            SyntheticKindName::Blobs => {
                if s.noise.is_some() {
                    return Err(Error::config(path("noise"), "only valid for spirals"));
                }
                let dim = s.dim.ok_or_else(|| Error::config(path("dim"), "required for blobs"))?;
                SyntheticKind::Blobs { dim }
            }
            SyntheticKindName::Spirals => {
                if s.dim.is_some() {
                    return Err(Error::config(path("dim"), "spirals are two-dimensional"));
                }
                SyntheticKind::Spirals {
                    noise: s.noise.unwrap_or(0.0),
                }
            }
        };
        let spec = SyntheticSpec {
            kind,
            num_classes: s.classes,
            samples_per_class: s.per_class,
            seed: s.seed.unwrap_or(self.seed),
        };
        spec.validate()
            .map_err(|e| Error::config("dataset.synthetic", e.to_string()))?;
        Ok(Some(spec))
    }

    pub fn pruning_plan(&self) -> Result<PruningPlan> {
        let p = &self.pruning;
        // A zero target prunes nothing under either schedule.
        let mode = if p.target_sparsity == 0.0 {
            PruningMode::None
        } else {
            p.mode
        };
        PruningPlan::for_budget(mode, p.target_sparsity, p.cycles, self.federation.rounds, p.osp_round)
    }

    pub fn policy(&self) -> Result<ParticipationPolicy> {
        ParticipationPolicy::new(self.federation.clients, self.participation.fraction)
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            snr_db: self.channel.snr_db,
            noise_enabled: self.channel.noise_enabled,
        }
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            learning_rate: self.federation.learning_rate,
            batch_size: self.federation.batch_size,
            local_steps: self.federation.local_steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": { "layer_sizes": [2, 8, 3] },
        "dataset": { "synthetic": { "kind": "blobs", "classes": 3, "per_class": 50, "dim": 2 } }
    }"#;

    fn with(section: &str) -> String {
        format!(
            r#"{{ "model": {{ "layer_sizes": [2, 8, 3] }},
                 "dataset": {{ "synthetic": {{ "kind": "blobs", "classes": 3, "per_class": 50, "dim": 2 }} }},
                 {section} }}"#
        )
    }

    fn error_path(text: &str) -> String {
        match parse_config(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.federation.batch_size, 64);
        assert_eq!(c.federation.learning_rate, 0.001);
        assert_eq!(c.channel.snr_db, 10.0);
        assert!(c.channel.noise_enabled);
        assert_eq!(c.federation.clients, 100);
        assert_eq!(c.federation.rounds, 1000);
        assert_eq!(c.participation.fraction, 1.0);
        assert_eq!(c.pruning.mode, PruningMode::None);
        assert_eq!(c.pruning.cycles, 5);
    }

    #[test]
    fn range_errors_name_the_field() {
        assert_eq!(error_path(&with(r#""participation": { "fraction": 1.5 }"#)), "participation.fraction");
        assert_eq!(error_path(&with(r#""federation": { "learning_rate": 0 }"#)), "federation.learning_rate");
        assert_eq!(
            error_path(&with(r#""pruning": { "mode": "one_shot", "target_sparsity": 1.0 }"#)),
            "pruning.target_sparsity"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert_eq!(error_path(&with(r#""pruning": { "magic": 3 }"#)), "pruning.magic");
        assert_eq!(error_path(&with(r#""extra": 3"#)), "extra");
    }

    #[test]
    fn type_errors_carry_paths() {
        assert_eq!(error_path(&with(r#""federation": { "rounds": "many" }"#)), "federation.rounds");
        assert!(matches!(parse_config("{"), Err(Error::Config { .. })));
    }

    #[test]
    fn dataset_variants() {
        let spirals = r#"{ "model": { "layer_sizes": [2, 3] },
            "dataset": { "synthetic": { "kind": "spirals", "classes": 3, "per_class": 10, "noise": 0.1 } } }"#;
        assert!(parse_config(spirals).unwrap().synthetic_spec().unwrap().is_some());
        let blobs_missing_dim = r#"{ "model": { "layer_sizes": [2, 3] },
            "dataset": { "synthetic": { "kind": "blobs", "classes": 3, "per_class": 10 } } }"#;
        assert_eq!(error_path(blobs_missing_dim), "dataset.synthetic.dim");
        let csv = r#"{ "model": { "layer_sizes": [2, 3] }, "dataset": { "csv": { "path": "x.csv", "classes": 3 } } }"#;
        assert!(parse_config(csv).unwrap().synthetic_spec().unwrap().is_none());
    }

    #[test]
    fn iterative_plan_must_fit_budget() {
        let text = with(r#""federation": { "rounds": 6 }, "pruning": { "mode": "iterative", "target_sparsity": 0.5 }"#);
        assert_eq!(error_path(&text), "pruning");
    }

    #[test]
    fn zero_target_disables_pruning() {
        let text = with(r#""federation": { "rounds": 20 }, "pruning": { "mode": "iterative", "target_sparsity": 0.0 }"#);
        let plan = parse_config(&text).unwrap().pruning_plan().unwrap();
        assert_eq!(plan.mode(), PruningMode::None);
    }
}
