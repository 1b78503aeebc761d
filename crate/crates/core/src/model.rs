//! Frozen backbone plus its adapters and optional echo modules.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterSet, Dropout};
use crate::autodiff::{Graph, Tensor};
use crate::backbone::{self, init_backbone, BackboneConfig, ForwardOutput, FrozenWeights};
use crate::data::NextTokenPredictor;
use crate::echo::{init_echo_params, EchoConfig, EchoInjection, EchoModules, InjectionContext};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// `None` trains plain LoRA/DoRA.
    pub echo: Option<EchoConfig>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: FrozenWeights,
    pub adapters: AdapterSet,
    pub echo: Option<EchoModules>,
}

impl Model {
    /// Backbone from its own seed, adapters and echo modules from `init_seed`.
    pub fn init(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        let backbone = init_backbone(&config.backbone)?;
        let adapters = AdapterSet::init(&config.adapter, &backbone, init_seed)?;
        let echo = match &config.echo {
            Some(cfg) => Some(init_echo_params(cfg, &config.backbone, init_seed)?),
            None => None,
        };
        Ok(Model { backbone, adapters, echo })
    }

    /// Rebuilds a model described by `config` from named tensors. Every name
    /// the config implies must be present; extra names are left in place.
    pub fn from_named(config: &ModelConfig, mut take: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let backbone = FrozenWeights::from_named(&config.backbone, &mut take)?;
        let adapters = AdapterSet::from_named(&config.adapter, &backbone, &mut take)?;
        let echo = match &config.echo {
            Some(cfg) => Some(EchoModules::from_named(cfg, &config.backbone, &mut take)?),
            None => None,
        };
        Ok(Model { backbone, adapters, echo })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Forward pass; `echo_ctx` selects the Echo-on path.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[usize],
        echo_ctx: Option<&InjectionContext>,
        dropout: Dropout,
    ) -> Result<ForwardOutput> {
        let injection = match (echo_ctx, &self.echo) {
            (Some(ctx), Some(modules)) => Some(EchoInjection { modules, ctx }),
            (Some(_), None) => return Err(Error::Config("echo context given to a model without echo modules".into())),
            (None, _) => None,
        };
        backbone::forward(g, &self.backbone, &self.adapters, tokens, injection.as_ref(), dropout)
    }

    /// The same model without echo modules: what gets deployed.
    pub fn strip_echo(&self) -> Model {
        Model { backbone: self.backbone.clone(), adapters: self.adapters.clone(), echo: None }
    }

    /// Backbone with every adapter folded into its projection and no adapters left.
    pub fn merged(&self) -> Result<Model> {
        Ok(Model { backbone: self.adapters.merge_into(&self.backbone)?, adapters: AdapterSet::empty(), echo: None })
    }

    pub fn trainable_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.adapters.named_tensors();
        if let Some(echo) = &self.echo {
            out.extend(echo.named_tensors());
        }
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.adapters.named_tensors_mut();
        if let Some(echo) = &mut self.echo {
            out.extend(echo.named_tensors_mut());
        }
        out
    }

    /// Every tensor, frozen and trainable, under its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        out.extend(self.trainable_tensors());
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.trainable_tensors_mut() {
            t.zero_grad();
        }
    }
}

impl NextTokenPredictor for Model {
    fn vocab_size(&self) -> usize {
        self.backbone.config.vocab_size
    }

    /// Echo-off logits without dropout.
    fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, None, Dropout::Off)?;
        Ok(g.value(out.logits).to_vec())
    }
}
