//! Run configuration: a named profile plus TOML overrides.
//!
//! A config file names a `profile` (`toy` or `full`) and may override any
//! field of it; tables are merged key by key. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::{FocalParams, LossWeights};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// 1-based epochs after which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Linear ramp from zero over the first iterations; 0 disables it.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub flips: bool,
    /// Scenes written by `synth-data` into `train` and `test`.
    pub synth_train: u64,
    pub synth_test: u64,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub max_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    /// Directory for the checkpoint, logs and reports.
    pub output: PathBuf,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            profile: "toy".into(),
            seed: 0,
            output: "runs/toy".into(),
            model: ModelConfig::toy(),
            optim: OptimConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                epochs: 12,
                decay_epochs: vec![8, 11],
                decay_factor: 0.1,
                batch_size: 5,
                warmup_iters: 100,
                clip_norm: 1.0,
            },
            loss: LossConfig {
                weights: LossWeights::default(),
                focal: FocalParams::default(),
            },
            data: DataConfig {
                train: "data/toy/train".into(),
                test: "data/toy/test".into(),
                flips: true,
                synth_train: 2000,
                synth_test: 200,
                synth: SynthConfig::default(),
            },
            eval: EvalConfig {
                protocol: Protocol::Voc12,
                max_detections: 100,
            },
        }
    }

    pub fn full() -> Self {
        let toy = RunConfig::toy();
        RunConfig {
            profile: "full".into(),
            output: "runs/full".into(),
            model: ModelConfig::full(),
            optim: OptimConfig {
                lr: 5e-5,
                batch_size: 4,
                warmup_iters: 0,
                clip_norm: 0.0,
                ..toy.optim
            },
            data: DataConfig {
                train: "data/dota/train".into(),
                test: "data/dota/val".into(),
                ..toy.data
            },
            eval: EvalConfig {
                max_detections: 300,
                ..toy.eval
            },
            ..toy
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(RunConfig::toy()),
            "full" => Ok(RunConfig::full()),
            _ => Err(Error::Config(format!("unknown profile {:?}; use toy or full", name))),
        }
    }

    /// Profile named by the `profile` key (default `toy`) with the rest of
    /// the document merged over it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let name = match doc.get("profile") {
            None => "toy",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(v) => return Err(Error::Config(format!("profile must be a string, got {}", v))),
        };
        let base = RunConfig::profile(name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        self.loss.focal.validate()?;
        self.data.synth.validate()?;
        let o = &self.optim;
        let bad = |m: String| Err(Error::Config(m));
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 || o.eps <= 0.0 {
            return bad(format!("lr must be positive and weight_decay non-negative: {:?}", o));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!("betas must lie in [0, 1): {} {}", o.beta1, o.beta2));
        }
        if o.epochs == 0 || o.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) || o.clip_norm < 0.0 {
            return bad(format!(
                "decay_factor must be in (0, 1] and clip_norm non-negative: {:?}",
                o
            ));
        }
        if o.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay epochs must increase: {:?}", o.decay_epochs));
        }
        if self.data.synth.classes > self.model.classes {
            return bad(format!(
                "synthetic classes {} exceed model classes {}",
                self.data.synth.classes, self.model.classes
            ));
        }
        if self.eval.max_detections == 0 {
            return bad("max_detections must be positive".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for cfg in [RunConfig::toy(), RunConfig::full()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_merge_into_profile() {
        let cfg = RunConfig::from_toml_str("profile = \"full\"\nseed = 9\n[optim]\nepochs = 24\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optim.epochs, 24);
        assert_eq!(cfg.optim.lr, 5e-5);
        assert_eq!(cfg.model, ModelConfig::full());
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::toy());
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for text in [
            "profile = \"huge\"",
            "[optim]\nlearning_rate = 1.0",
            "[optim]\nlr = -1.0",
            "[model]\nwidth = 63",
            "[model]\nclasses = 2",
            "seed = \"x\"",
            "not toml",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{}",
                text
            );
        }
    }
}
