//! Experiment configuration for the command-line tool.
//!
//! A single root seed feeds every random stream: the encoder and trainer
//! seeds are derived from it when the config is resolved, and the resolved
//! form is what gets echoed next to the results.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{default_domain_specs, default_holdout_spec, generate_domain, io, DataError, DomainDataset, SyntheticDomainSpec};
use crate::encoder::EncoderConfig;
use crate::seed;
use crate::trainer::{Protocol, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    TwoStep,
    #[default]
    FourStep,
    /// One step per domain, then retrieval on a held-out domain.
    ZeroShot,
}

impl ProtocolKind {
    pub fn training_protocol(self) -> Protocol {
        match self {
            ProtocolKind::TwoStep => Protocol::TwoStep,
            ProtocolKind::FourStep | ProtocolKind::ZeroShot => Protocol::FourStep,
        }
    }
}

/// Training domains, in protocol order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSource {
    /// Paths to dataset manifests, relative to the config file.
    Manifests(Vec<PathBuf>),
    Synthetic(Vec<SyntheticDomainSpec>),
}

impl Default for DomainSource {
    fn default() -> Self {
        DomainSource::Synthetic(default_domain_specs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutSource {
    Manifest(PathBuf),
    Synthetic(SyntheticDomainSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub protocol: ProtocolKind,
    pub domains: DomainSource,
    /// Used by the zero-shot protocol; defaults to the built-in holdout.
    pub holdout: Option<HoldoutSource>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    /// N values of the final Recall@N curve.
    pub recall_n: Vec<usize>,
    /// Overridden by `--out`.
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            protocol: ProtocolKind::FourStep,
            domains: DomainSource::default(),
            holdout: None,
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            recall_n: vec![1, 5, 10, 25],
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Reads a config; relative manifest paths are taken relative to the
    /// config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DomainSource::Manifests(paths) = &mut config.domains {
            for p in paths.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(HoldoutSource::Manifest(p)) = &mut config.holdout {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        self.encoder
            .validate()
            .map_err(|e| ConfigError::invalid("encoder", e.to_string()))?;
        if self.recall_n.is_empty() || self.recall_n.contains(&0) {
            return Err(ConfigError::invalid("recall_n", "needs at least one N, all >= 1"));
        }
        match &self.domains {
            DomainSource::Manifests(paths) if paths.is_empty() => {
                return Err(ConfigError::invalid("domains", "no domains given"));
            }
            DomainSource::Synthetic(specs) => {
                if specs.is_empty() {
                    return Err(ConfigError::invalid("domains", "no domains given"));
                }
                let mut ids = Vec::new();
                for (i, s) in specs.iter().enumerate() {
                    s.validate().map_err(|e| prefix_field(e, &format!("domains[{i}]")))?;
                    if ids.contains(&s.domain_id) {
                        return Err(ConfigError::invalid(
                            format!("domains[{i}].domain_id"),
                            format!("duplicate id {}", s.domain_id),
                        ));
                    }
                    ids.push(s.domain_id);
                }
            }
            DomainSource::Manifests(_) => {}
        }
        if let Some(HoldoutSource::Synthetic(s)) = &self.holdout {
            s.validate().map_err(|e| prefix_field(e, "holdout"))?;
        }
        Ok(())
    }

    /// Validated copy with derived seeds and the method's distillation kind.
    pub fn resolved(&self) -> Result<Self, ConfigError> {
        self.validate()?;
        let mut c = self.clone();
        c.encoder.seed = seed::derive(self.seed, "encoder", &[]);
        c.train.seed = seed::derive(self.seed, "trainer", &[]);
        c.train = c.train.resolved();
        if c.protocol == ProtocolKind::ZeroShot && c.holdout.is_none() {
            c.holdout = Some(HoldoutSource::Synthetic(default_holdout_spec()));
        }
        Ok(c)
    }

    pub fn load_domains(&self) -> Result<Vec<DomainDataset>, ConfigError> {
        let domains: Vec<DomainDataset> = match &self.domains {
            DomainSource::Manifests(paths) => paths
                .iter()
                .map(|p| io::load_dataset(p))
                .collect::<Result<_, _>>()?,
            DomainSource::Synthetic(specs) => specs.iter().map(generate_domain).collect::<Result<_, _>>()?,
        };
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].iter().any(|e| e.domain_id == d.domain_id) {
                return Err(ConfigError::invalid("domains", format!("domain id {} appears twice", d.domain_id)));
            }
        }
        Ok(domains)
    }

    pub fn load_holdout(&self) -> Result<Option<DomainDataset>, ConfigError> {
        Ok(match &self.holdout {
            None => None,
            Some(HoldoutSource::Manifest(p)) => Some(io::load_dataset(p)?),
            Some(HoldoutSource::Synthetic(s)) => Some(generate_domain(s)?),
        })
    }
}

fn prefix_field(e: DataError, prefix: &str) -> ConfigError {
    match e {
        DataError::InvalidSpec { field, reason } => ConfigError::invalid(format!("{prefix}.{field}"), reason),
        other => ConfigError::invalid(prefix, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "epochs": 3}"#, Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("epochs"));
        let nested = ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#, Path::new("c.json"));
        assert!(nested.is_err());
    }

    #[test]
    fn partial_config_takes_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"seed": 4, "protocol": "two-step", "train": {"method": "ft", "epochs": 2}}"#,
            Path::new("c.json"),
        )
        .unwrap();
        assert_eq!(c.protocol, ProtocolKind::TwoStep);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_anchors, 16);
        assert_eq!(c.recall_n, vec![1, 5, 10, 25]);
    }

    #[test]
    fn resolution_derives_seeds_and_is_stable() {
        let c = ExperimentConfig {
            seed: 9,
            protocol: ProtocolKind::ZeroShot,
            ..ExperimentConfig::default()
        };
        let r = c.resolved().unwrap();
        assert_ne!(r.encoder.seed, r.train.seed);
        assert!(r.holdout.is_some());
        let echo = serde_json::to_string(&r).unwrap();
        let back = ExperimentConfig::from_json(&echo, Path::new("echo.json")).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved().unwrap().encoder.seed, r.encoder.seed);
    }

    #[test]
    fn invalid_domain_spec_names_the_field() {
        let c = ExperimentConfig {
            domains: DomainSource::Synthetic(vec![SyntheticDomainSpec {
                num_places: 1,
                ..SyntheticDomainSpec::default()
            }]),
            ..ExperimentConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("domains[0].num_places"), "{msg}");
    }
}
