//! Run configuration: one TOML file, every field defaulted, unknown keys rejected.
//!
//! ```toml
//! [adapter]
//! kind = "dora"
//!
//! [echo]
//! source_layers = [-4, -3]
//! target_layers = [2, 3]
//! target_projections = ["q", "v"]
//!
//! [train]
//! epochs = 3
//! ```

use std::path::{Path, PathBuf};

use echo_lora::adapters::AdapterConfig;
use echo_lora::backbone::{BackboneConfig, Projection};
use echo_lora::data::DataConfig;
use echo_lora::echo::EchoConfig;
use echo_lora::model::ModelConfig;
use echo_lora::objective::ObjectiveConfig;
use echo_lora::routing::{RoutingConfig, RoutingSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Echo settings plus an on/off switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoSection {
    pub enabled: bool,
    pub source_layers: Vec<i64>,
    pub target_layers: Vec<i64>,
    pub target_projections: Vec<Projection>,
    pub bottleneck_dim: usize,
    pub gate_bias_init: f64,
    pub lambda_init: f64,
    pub answer_only_mask: bool,
}

impl Default for EchoSection {
    fn default() -> Self {
        EchoSection::from_config(&EchoConfig::default(), true)
    }
}

impl EchoSection {
    pub fn from_config(c: &EchoConfig, enabled: bool) -> Self {
        EchoSection {
            enabled,
            source_layers: c.source_layers.clone(),
            target_layers: c.target_layers.clone(),
            target_projections: c.target_projections.clone(),
            bottleneck_dim: c.bottleneck_dim,
            gate_bias_init: c.gate_bias_init,
            lambda_init: c.lambda_init,
            answer_only_mask: c.answer_only_mask,
        }
    }

    pub fn to_config(&self) -> Option<EchoConfig> {
        self.enabled.then(|| EchoConfig {
            source_layers: self.source_layers.clone(),
            target_layers: self.target_layers.clone(),
            target_projections: self.target_projections.clone(),
            bottleneck_dim: self.bottleneck_dim,
            gate_bias_init: self.gate_bias_init,
            lambda_init: self.lambda_init,
            answer_only_mask: self.answer_only_mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 3, batch_size: 16, out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub routing: u64,
    pub dropout: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds { init: seed, data: seed, routing: seed, dropout: seed }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub echo: EchoSection,
    pub routing: RoutingConfig,
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub seeds: Seeds,
}

impl RunConfig {
    /// Parses and validates `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config {
            origin: origin.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|(section, message)| HarnessError::Config {
            origin: origin.to_string(),
            line: section_line(text, section),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// CRC-32 of the canonical text form.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_toml().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { backbone: self.backbone.clone(), adapter: self.adapter.clone(), echo: self.echo.to_config() }
    }

    /// Sets every seed except the backbone's, which stands for the pretrained weights.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }

    /// Checks cross-field invariants; the error names the offending section.
    fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.backbone.validate().map_err(|e| ("backbone", e.to_string()))?;
        self.adapter.validate().map_err(|e| ("adapter", e.to_string()))?;
        if let Some(echo) = self.echo.to_config() {
            echo.resolve(self.backbone.n_layers).map_err(|e| ("echo", e.to_string()))?;
        }
        RoutingSchedule::from_config(&self.routing, 1, 0).map_err(|e| ("routing", e.to_string()))?;
        self.objective.validate().map_err(|e| ("objective", e.to_string()))?;
        if self.data.tasks.is_empty() || self.data.train_per_task == 0 || self.data.eval_per_task == 0 {
            return Err(("data", "tasks, train_per_task and eval_per_task must be non-empty".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(("train", "epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the `[section]` header, or 0 when the section is absent.
fn section_line(text: &str, section: &str) -> usize {
    let header = format!("[{section}]");
    text.lines().position(|l| l.trim() == header).map_or(0, |i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", "empty").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.adapter.rank, 16);
        assert_eq!(cfg.adapter.alpha, 32.0);
        assert_eq!(cfg.routing.p_end, 0.2);
        assert_eq!(cfg.objective.tau, 2.0);
        assert!(cfg.echo.enabled);
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.echo.enabled = false;
        cfg.adapter.projections = vec![Projection::Q];
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text, "rt").unwrap(), cfg);
        assert_eq!(RunConfig::parse(&text, "rt").unwrap().hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_line_anchored() {
        let text = "[train]\nepochs = 2\n\n[adapter]\nrnak = 4\n";
        let err = RunConfig::parse(text, "bad.toml").unwrap_err();
        match &err {
            HarnessError::Config { line, message, .. } => {
                assert_eq!(*line, 5);
                assert!(message.contains("rnak"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().starts_with("bad.toml:5:"));
    }

    #[test]
    fn invalid_values_point_at_section() {
        let text = "[backbone]\nn_layers = 12\n\n[echo]\nsource_layers = [1]\ntarget_layers = [3]\n";
        match RunConfig::parse(text, "x").unwrap_err() {
            HarnessError::Config { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("deeper"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seed_override_leaves_backbone() {
        let cfg = RunConfig::default().with_seed(7);
        assert_eq!(cfg.seeds, Seeds::all(7));
        assert_eq!(cfg.backbone.seed, 0);
    }
}
