//! Experiment configuration: one TOML document with full defaulting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{AugmentPolicy, BackboneConfig, InputKind};
use crate::cgan::GanConfig;
use crate::data::{DatasetKind, DatasetSpec, EpisodeSpec, Phase, SplitSizes};
use crate::error::{DafosError, Result};
use crate::heads::HeadConfig;
use crate::losses::LossWeights;
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub episodes: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Episodes whose gradients are averaged into one optimizer step.
    pub episodes_per_step: usize,
    /// Global-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Generator-pair training rounds before each feature-extractor update.
    pub gan_rounds: usize,
    /// Write a checkpoint every this many episodes; `0` writes only at the end.
    pub checkpoint_every: usize,
    /// Threads used to sample and materialize episodes ahead of training.
    pub workers: usize,
    /// Samples per class embedded into the frozen source prototype bank.
    pub bank_samples_per_class: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            episodes: 500,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            episodes_per_step: 8,
            grad_clip: 10.0,
            gan_rounds: 1,
            checkpoint_every: 0,
            workers: 1,
            bank_samples_per_class: 50,
        }
    }
}

impl TrainOptions {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Standard,
    Generalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub unknown: usize,
    pub queries: usize,
    pub mode: EvalMode,
    /// Augment test supports with low-noise synthetic features before
    /// computing prototypes.
    pub test_augment: bool,
    /// Synthetic features per support class; defaults to the training value.
    pub synth_per_class: Option<usize>,
    pub workers: usize,
    /// Independent evaluation runs (different episode seeds).
    pub runs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 500,
            ways: 5,
            shots: 1,
            unknown: 5,
            queries: 15,
            mode: EvalMode::Standard,
            test_augment: true,
            synth_per_class: None,
            workers: 1,
            runs: 1,
        }
    }
}

impl EvalOptions {
    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            unknown: self.unknown,
            source_shots: 0,
            target_shots: self.shots,
            queries: self.queries,
            phase: Phase::Test,
            generalized: self.mode == EvalMode::Generalized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub splits: SplitSizes,
    pub backbone: BackboneConfig,
    pub augment: AugmentPolicy,
    pub episode: EpisodeSpec,
    pub gan: GanConfig,
    pub loss: LossWeights,
    pub heads: HeadConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            dataset: DatasetSpec::default(),
            splits: SplitSizes::default(),
            backbone: BackboneConfig::default(),
            augment: AugmentPolicy::default(),
            // The synthetic target pool has six classes: five known, one pseudo-unknown.
            episode: EpisodeSpec {
                unknown: 1,
                ..EpisodeSpec::default()
            },
            gan: GanConfig::default(),
            loss: LossWeights::default(),
            heads: HeadConfig::default(),
            train: TrainOptions::default(),
            eval: EvalOptions::default(),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(DafosError::config(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                let task = self
                    .dataset
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| DafosError::config("dataset.synthetic", "required for a synthetic dataset"))?;
                if task.dim == 0 || task.classes == 0 || task.samples_per_class == 0 {
                    return Err(DafosError::config("dataset.synthetic", "dimensions and counts must be positive"));
                }
                if self.backbone.input != (InputKind::Vector { dim: task.dim }) {
                    return Err(DafosError::config(
                        "backbone.input",
                        format!("synthetic task needs a vector input of dim {}", task.dim),
                    ));
                }
            }
            DatasetKind::Directory => {
                if self.dataset.root.is_none() {
                    return Err(DafosError::config("dataset.root", "required for a directory dataset"));
                }
            }
            DatasetKind::Listing => {
                if self.dataset.listing.is_empty() {
                    return Err(DafosError::config("dataset.listing", "required for a listing dataset"));
                }
            }
        }
        self.backbone.validate()?;
        self.augment.validate()?;
        if self.episode.phase != Phase::Train {
            return Err(DafosError::config("episode.phase", "the episode block describes training episodes"));
        }
        self.episode.validate()?;
        self.gan.validate()?;
        self.loss.validate()?;
        self.heads.validate()?;

        let t = &self.train;
        positive("train.episodes", t.episodes)?;
        positive("train.episodes_per_step", t.episodes_per_step)?;
        positive("train.gan_rounds", t.gan_rounds)?;
        positive("train.workers", t.workers)?;
        positive("train.bank_samples_per_class", t.bank_samples_per_class)?;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(DafosError::config("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(DafosError::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(t.adam_eps > 0.0) {
            return Err(DafosError::config("train.adam_eps", "must be positive"));
        }
        if !(t.grad_clip >= 0.0) {
            return Err(DafosError::config("train.grad_clip", "must be nonnegative"));
        }

        let e = &self.eval;
        positive("eval.episodes", e.episodes)?;
        positive("eval.shots", e.shots)?;
        positive("eval.unknown", e.unknown)?;
        positive("eval.queries", e.queries)?;
        positive("eval.workers", e.workers)?;
        positive("eval.runs", e.runs)?;
        if e.ways != self.episode.ways {
            return Err(DafosError::config(
                "eval.ways",
                "must equal episode.ways (the heads read 2·ways distances)",
            ));
        }
        if e.synth_per_class == Some(0) {
            return Err(DafosError::config("eval.synth_per_class", "must be at least 1"));
        }
        e.episode_spec().validate()?;

        let (ep, sp) = (&self.episode, &self.splits);
        for (field, pool, name) in [
            ("splits.source_train", sp.source_train, "source"),
            ("splits.target_train", sp.target_train, "target"),
        ] {
            if ep.ways + ep.unknown > pool {
                return Err(DafosError::config(
                    field,
                    format!("{name} pool of {pool} classes cannot hold {} known + {} unknown", ep.ways, ep.unknown),
                ));
            }
        }
        if e.ways > sp.test_known {
            return Err(DafosError::config("eval.ways", "exceeds splits.test_known"));
        }
        if e.unknown > sp.test_unknown {
            return Err(DafosError::config("eval.unknown", "exceeds splits.test_unknown"));
        }
        if e.mode == EvalMode::Generalized && e.ways > sp.source_train {
            return Err(DafosError::config("eval.ways", "generalized mode draws that many source-train classes"));
        }
        Ok(())
    }

    /// Synthetic features per class during training.
    pub fn train_synth_per_class(&self) -> usize {
        self.gan.synth_per_class.unwrap_or(self.episode.source_shots)
    }

    pub fn eval_synth_per_class(&self) -> usize {
        self.eval.synth_per_class.unwrap_or_else(|| self.train_synth_per_class())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DafosError::Serde(e.to_string()))
    }

    /// Short hex digest of the canonical serialization.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| DafosError::io(path, e))
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let field = e
            .span()
            .and_then(|s| text.get(s))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty() && s.len() < 64)
            .unwrap_or_else(|| "config".into());
        DafosError::config(field, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `dotted.key=value` overrides to a configuration document. Values
/// are read as TOML literals, falling back to plain strings.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| DafosError::config("config", e.message()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| DafosError::config(item.as_str(), "overrides are written key=value"))?;
        let key = key.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut doc;
        for part in path {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| DafosError::config(key, format!("`{part}` is not a table")))?;
        }
        table.insert(last.to_string(), value);
    }
    toml::to_string(&doc).map_err(|e| DafosError::Serde(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DafosError::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("seed = 3\n").unwrap();
        assert_eq!(cfg.gan.sigma_low, 0.3);
        assert_eq!(cfg.gan.sigma_high, 0.9);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.episodes_per_step, 8);
        assert_eq!(cfg.augment.strong_magnitude_max, 0.5);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn inverted_sigmas_name_the_field() {
        let err = parse_config("[gan]\nsigma_low = 0.9\nsigma_high = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("gan.sigma_low"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("[gan]\nsigma_lo = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("sigma_lo"), "{err}");
        assert!(parse_config("bogus = 1\n").is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.gan.synth_per_class = Some(3);
        cfg.output_dir = Some("runs/x".into());
        cfg.eval.mode = EvalMode::Generalized;
        let text = cfg.to_toml().unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert_eq!(cfg.fingerprint().unwrap(), parse_config(&text).unwrap().fingerprint().unwrap());
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let text = apply_overrides(
            "seed = 1\n[gan]\nsigma_low = 0.2\n",
            &["gan.sigma_low=0.1".into(), "train.lr = 0.01".into(), "eval.mode=generalized".into()],
        )
        .unwrap();
        let cfg = parse_config(&text).unwrap();
        assert_eq!((cfg.gan.sigma_low, cfg.train.lr, cfg.eval.mode), (0.1, 0.01, EvalMode::Generalized));
        assert!(apply_overrides("seed = 1\n", &["seed.x=2".into()]).is_err());
        assert!(apply_overrides("", &["novalue".into()]).is_err());
        let err = parse_config(&apply_overrides("", &["gan.sigma_lo=0.1".into()]).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn eval_ways_must_match_training_ways() {
        let err = parse_config("[eval]\nways = 3\n").unwrap_err();
        assert!(err.to_string().contains("eval.ways"));
    }

    #[test]
    fn episode_must_fit_the_class_pools() {
        let err = parse_config("[episode]\nunknown = 2\n").unwrap_err();
        assert!(err.to_string().contains("splits.target_train"), "{err}");
        assert!(parse_config("[episode]\nunknown = 2\n[splits]\ntarget_train = 7\nsource_train = 9\n[dataset.synthetic]\nclasses = 26\n").is_ok());
    }

    #[test]
    fn synthetic_dim_must_match_backbone() {
        let err = parse_config("[backbone.input]\nkind = \"vector\"\ndim = 4\n").unwrap_err();
        assert!(err.to_string().contains("backbone.input"));
    }
}
