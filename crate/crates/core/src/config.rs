//! Whole-run configuration, read from and written to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domains::{default_domains, DatasetConfig, DomainSpec};
use crate::episodic::{TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::nets::SegNetConfig;

/// Ablation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Training seeds shared by every variant.
    pub seeds: Vec<u64>,
    pub modes: Vec<TrainMode>,
    /// Also run the lambda1-only / lambda2-only / both sweep in full mode.
    pub lambda_sweep: bool,
    /// Independent runs executed concurrently.
    pub jobs: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0, 1, 2, 3, 4], modes: TrainMode::ALL.to_vec(), lambda_sweep: false, jobs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Domains trained on.
    pub sources: Vec<String>,
    /// Held-out domains evaluated by `eval` and `ablate`.
    pub targets: Vec<String>,
    /// Write a checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    /// Evaluation batch size.
    pub eval_batch: usize,
    pub net: SegNetConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub ablate: AblateConfig,
    pub domains: Vec<DomainSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            sources: vec!["vivid".into(), "dusk".into()],
            targets: vec!["pastel".into()],
            checkpoint_every: 500,
            eval_batch: 16,
            net: SegNetConfig::default(),
            train: TrainConfig::default(),
            data: DatasetConfig::default(),
            ablate: AblateConfig::default(),
            domains: default_domains(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Checks the whole configuration before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let s = self.net.output_stride;
        if self.data.scene.height % s != 0 || self.data.scene.width % s != 0 {
            return Err(Error::config(format!(
                "scene size {}x{} is not divisible by output stride {s}",
                self.data.scene.height, self.data.scene.width
            )));
        }
        if self.net.num_classes != crate::domains::SCENE_CLASSES {
            return Err(Error::config(format!(
                "the scene generator draws {} classes but net.num_classes is {}",
                crate::domains::SCENE_CLASSES,
                self.net.num_classes
            )));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate()?;
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return Err(Error::config(format!("duplicate domain id `{}`", d.id)));
            }
        }
        let known = |id: &String| self.domains.iter().any(|d| &d.id == id);
        for id in self.sources.iter().chain(&self.targets) {
            if !known(id) {
                return Err(Error::config(format!("domain `{id}` is not defined")));
            }
        }
        if self.sources.is_empty() {
            return Err(Error::config("at least one source domain is required"));
        }
        if self.train.single_source != (self.sources.len() == 1) && self.train.mode.is_episodic() {
            return Err(Error::config(if self.train.single_source {
                "single_source needs exactly one source domain"
            } else {
                "episodic training needs at least two source domains (or single_source = true)"
            }));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be positive"));
        }
        if self.ablate.seeds.is_empty() || self.ablate.jobs == 0 {
            return Err(Error::config("ablation needs at least one seed and one job"));
        }
        // TOML integers are signed, seeds above i64::MAX would not survive config.toml
        let seeds = [self.train.seed, self.data.seed].into_iter().chain(self.ablate.seeds.iter().copied());
        if let Some(s) = seeds.into_iter().find(|&s| s > i64::MAX as u64) {
            return Err(Error::config(format!("seed {s} exceeds {}", i64::MAX)));
        }
        Ok(())
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml("nonsense = 1").is_err());
        assert!(RunConfig::from_toml("sources = [\"nowhere\"]").is_err());
        assert!(RunConfig::from_toml("[train]\nmemory_momentum = 1.5").is_err());
        assert!(RunConfig::from_toml("[net]\noutput_stride = 3").is_err());
    }
}
