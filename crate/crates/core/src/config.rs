//! Experiment configuration, read from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interp::GridShape;
use crate::losses::DistillationWeights;
use crate::model::{hex, AttentionQuery, ModelConfig};
use crate::synth::{DatasetConfig, ExpertConfig};
use crate::train::StepConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoVis,
    NoAtt,
    LoraOnly,
    NoDistillDirect,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Full, Mode::NoVis, Mode::NoAtt, Mode::LoraOnly, Mode::NoDistillDirect];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoVis => "no_vis",
            Mode::NoAtt => "no_att",
            Mode::LoraOnly => "lora_only",
            Mode::NoDistillDirect => "no_distill_direct",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub distill_layer: usize,
    /// Further layers that receive the same losses, summed.
    pub extra_distill_layers: Vec<usize>,
    pub adapter_rank: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub student_grid: GridShape,
    pub vocab: usize,
    pub image_channels: usize,
    pub max_text_len: usize,
    pub positional: bool,
    pub expert_grid: GridShape,
    pub expert_channels: usize,
    pub noise_sigma: f64,
    pub sharpness_tau: f64,
    pub concentration: f64,
    pub entities: usize,
    pub pixel_noise: f64,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub attention_query: AttentionQuery,
    pub rotation_in_forward: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let e = ExpertConfig::default();
        let w = DistillationWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            distill_layer: 3,
            extra_distill_layers: Vec::new(),
            adapter_rank: 4,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            mlp_hidden: m.mlp_hidden,
            student_grid: m.grid,
            vocab: m.vocab,
            image_channels: m.image_channels,
            max_text_len: m.max_text_len,
            positional: m.positional,
            expert_grid: e.grid,
            expert_channels: e.channels,
            noise_sigma: e.sigma,
            sharpness_tau: e.tau,
            concentration: e.concentration,
            entities: e.entities,
            pixel_noise: DatasetConfig::default().pixel_noise,
            train_count: 200,
            eval_count: 200,
            seed: 0,
            learning_rate: 1e-3,
            steps: 400,
            batch_size: 8,
            mode: Mode::Full,
            attention_query: m.attention_query,
            rotation_in_forward: true,
            output_dir: None,
        }
    }
}

/// The settings a run actually depends on: the mode folded into the
/// weights, the output location dropped. Two configs with equal effective
/// settings produce identical runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub direct: bool,
    pub distill_layers: Vec<usize>,
    pub adapter_rank: usize,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub rotation_in_forward: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Small enough for finite differences over the whole model.
    pub fn grad_check_default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 6,
            mlp_hidden: 12,
            student_grid: GridShape::square(3),
            vocab: 20,
            image_channels: 4,
            max_text_len: 4,
            expert_grid: GridShape::square(6),
            expert_channels: 4,
            distill_layer: 2,
            adapter_rank: 2,
            alpha: 1.0,
            beta: 0.5,
            train_count: 20,
            eval_count: 1,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            mlp_hidden: self.mlp_hidden,
            vocab: self.vocab,
            grid: self.student_grid,
            image_channels: self.image_channels,
            max_text_len: self.max_text_len,
            positional: self.positional,
            attention_query: self.attention_query,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            expert: ExpertConfig {
                grid: self.expert_grid,
                entities: self.entities,
                channels: self.expert_channels,
                sigma: self.noise_sigma,
                tau: self.sharpness_tau,
                concentration: self.concentration,
            },
            pixel_noise: self.pixel_noise,
        }
    }

    pub fn distill_layers(&self) -> Vec<usize> {
        let mut layers = vec![self.distill_layer];
        layers.extend(&self.extra_distill_layers);
        layers
    }

    pub fn step_config(&self) -> StepConfig {
        let eff = self.effective();
        StepConfig {
            weights: DistillationWeights { alpha: eff.alpha, beta: eff.beta },
            distill_layers: eff.distill_layers,
            rotation_in_forward: self.rotation_in_forward,
            direct: eff.direct,
        }
    }

    pub fn effective(&self) -> EffectiveConfig {
        let (alpha, beta, direct) = match self.mode {
            Mode::Full => (self.alpha, self.beta, false),
            Mode::NoVis => (0.0, self.beta, false),
            Mode::NoAtt => (self.alpha, 0.0, false),
            Mode::LoraOnly => (0.0, 0.0, false),
            Mode::NoDistillDirect => (0.0, 0.0, true),
        };
        EffectiveConfig {
            alpha,
            beta,
            direct,
            distill_layers: self.distill_layers(),
            adapter_rank: self.adapter_rank,
            model: self.model_config(),
            dataset: self.dataset_config(),
            train_count: self.train_count,
            eval_count: self.eval_count,
            seed: self.seed,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            rotation_in_forward: self.rotation_in_forward,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.effective()).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        DistillationWeights::new(self.alpha, self.beta)?;
        let n = self.n_layers;
        for l in self.distill_layers() {
            if l == 0 || l > n {
                return Err(Error::Config(format!("distillation layer {l} outside 1..={n}")));
            }
        }
        let positive = [
            ("adapter_rank", self.adapter_rank),
            ("train_count", self.train_count),
            ("eval_count", self.eval_count),
            ("batch_size", self.batch_size),
            ("expert_channels", self.expert_channels),
            ("entities", self.entities),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("sharpness_tau", self.sharpness_tau),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.concentration) {
            return Err(Error::Config("concentration must lie in [0, 1]".into()));
        }
        GridShape::new(self.expert_grid.h, self.expert_grid.w).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        ExperimentConfig::grad_check_default().validate().unwrap();
    }

    #[test]
    fn partial_json_takes_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"alpha": 0.5, "mode": "no_att"}"#).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.mode, Mode::NoAtt);
        assert_eq!(cfg.beta, 0.03);
    }

    #[test]
    fn unknown_keys_and_modes_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"alpah": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"mode": "everything"}"#).is_err());
        assert!("bogus".parse::<Mode>().is_err());
        assert_eq!("no_vis".parse::<Mode>().unwrap(), Mode::NoVis);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for json in [
            r#"{"distill_layer": 0}"#,
            r#"{"distill_layer": 5}"#,
            r#"{"extra_distill_layers": [9]}"#,
            r#"{"d_model": 30}"#,
            r#"{"alpha": -1}"#,
            r#"{"batch_size": 0}"#,
            r#"{"learning_rate": 0}"#,
        ] {
            assert!(ExperimentConfig::from_json(json).is_err(), "{json}");
        }
    }

    #[test]
    fn modes_fold_into_weights() {
        let base = ExperimentConfig::default();
        let with = |mode, alpha, beta| ExperimentConfig { mode, alpha, beta, ..base.clone() };
        assert_eq!(with(Mode::Full, 0.0, 0.0).hash(), with(Mode::LoraOnly, 1.0, 0.03).hash());
        assert_eq!(with(Mode::Full, 0.0, 0.03).hash(), with(Mode::NoVis, 1.0, 0.03).hash());
        assert_eq!(with(Mode::Full, 1.0, 0.0).hash(), with(Mode::NoAtt, 1.0, 0.03).hash());
        assert_ne!(with(Mode::Full, 1.0, 0.03).hash(), with(Mode::LoraOnly, 1.0, 0.03).hash());
        assert_ne!(with(Mode::LoraOnly, 1.0, 0.03).hash(), with(Mode::NoDistillDirect, 1.0, 0.03).hash());
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: Some("/tmp/x".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 1, ..a.clone() }.hash());
    }
}
