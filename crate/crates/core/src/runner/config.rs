use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillMode;
use crate::error::{Error, Result};
use crate::model::{MaskActivation, ModelConfig};
use crate::objective::SegHyper;
use crate::protocol::OverlapMode;
use crate::synthdata::Geometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub palette_size: usize,
    pub thing_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
    /// Training scenes generated per anchor class.
    pub train_per_class: usize,
    /// Held-out scenes generated per anchor class.
    pub test_per_class: usize,
    pub seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            palette_size: 8,
            thing_classes: 4,
            channels: 3,
            height: 16,
            width: 16,
            max_instances: 2,
            train_per_class: 24,
            test_per_class: 8,
            seed: 1,
            test_seed: 1001,
        }
    }
}

impl DataConfig {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.height,
            width: self.width,
            max_instances: self.max_instances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// `None` keeps ascending class ids.
    pub ordering_seed: Option<u64>,
    pub initial: usize,
    pub increment: usize,
    pub overlap_mode: OverlapMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            ordering_seed: None,
            initial: 4,
            increment: 2,
            overlap_mode: OverlapMode::Overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub queries: usize,
    pub dim: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub mask_activation: MaskActivation,
    pub new_row_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            queries: 10,
            dim: 32,
            hidden: 16,
            ffn: 32,
            mask_activation: MaskActivation::Softmax,
            new_row_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub steps_initial: usize,
    pub steps_per_class: usize,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps_initial: 2000,
            steps_per_class: 400,
            lr_initial: 1e-3,
            lr_incremental: 5e-4,
            batch_size: 4,
            init_seed: 11,
            shuffle_seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_mask: f64,
    pub no_object_weight: f64,
    /// `None`: 1 for two-step protocols, 10 for longer ones.
    pub lambda_d: Option<f64>,
    pub distill_mode: DistillMode,
    pub pseudo_labels: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            gamma: 2.0,
            lambda_mask: 5.0,
            no_object_weight: 1.0,
            lambda_d: None,
            distill_mode: DistillMode::Ad,
            pseudo_labels: true,
        }
    }
}

impl LossConfig {
    pub fn seg_hyper(&self) -> SegHyper {
        SegHyper {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda_mask: self.lambda_mask,
            no_object_weight: self.no_object_weight,
        }
    }

    pub fn lambda_d_for(&self, tasks: usize) -> f64 {
        self.lambda_d.unwrap_or(if tasks <= 2 { 1.0 } else { 10.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub min_confidence: f64,
    pub min_area: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.5,
            min_area: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    pub model: ModelSection,
    pub optimization: OptimConfig,
    pub losses: LossConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "maskcl".into(),
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            model: ModelSection::default(),
            optimization: OptimConfig::default(),
            losses: LossConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/maskcl"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.data.channels,
            height: self.data.height,
            width: self.data.width,
            queries: self.model.queries,
            dim: self.model.dim,
            hidden: self.model.hidden,
            ffn: self.model.ffn,
            mask_activation: self.model.mask_activation,
            new_row_std: self.model.new_row_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("data.palette_size", self.data.palette_size),
            ("data.channels", self.data.channels),
            ("data.max_instances", self.data.max_instances),
            ("data.train_per_class", self.data.train_per_class),
            ("data.test_per_class", self.data.test_per_class),
            ("protocol.initial", self.protocol.initial),
            ("model.queries", self.model.queries),
            ("model.dim", self.model.dim),
            ("model.hidden", self.model.hidden),
            ("model.ffn", self.model.ffn),
            ("optimization.steps_initial", self.optimization.steps_initial),
            ("optimization.steps_per_class", self.optimization.steps_per_class),
            ("optimization.batch_size", self.optimization.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.data.height < 8 || self.data.width < 8 {
            return Err(Error::Config("grid must be at least 8x8".into()));
        }
        if !(self.optimization.lr_initial > 0.0 && self.optimization.lr_incremental > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.min_confidence) {
            return Err(Error::Config("eval.min_confidence must lie in [0, 1]".into()));
        }
        if self.losses.lambda_d.is_some_and(|v| v < 0.0) || self.losses.lambda_mask < 0.0 || self.losses.alpha < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.data.thing_classes > self.data.palette_size {
            return Err(Error::Config("more thing classes than palette entries".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.losses.lambda_d = Some(2.5);
        cfg.protocol.ordering_seed = Some(3);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"name": "x", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"losses": {"alpah": 1}}"#).is_err());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"losses": {"distill_mode": "kd", "pseudo_labels": false}}"#).unwrap();
        assert_eq!(cfg.losses.distill_mode, DistillMode::Kd);
        assert_eq!(cfg.losses.alpha, 20.0);
        assert_eq!(cfg.losses.lambda_mask, 5.0);
    }

    #[test]
    fn lambda_d_defaults_by_protocol_length() {
        let l = LossConfig::default();
        assert_eq!(l.lambda_d_for(2), 1.0);
        assert_eq!(l.lambda_d_for(3), 10.0);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"optimization": {"lr_initial": 0.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"queries": 0}}"#).is_err());
    }
}
