//! Cross-layer echo: deep hidden states at the answer boundary, averaged,
//! normalized, projected and gated, then added to shallow projection outputs
//! at answer positions.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, IGNORE_INDEX};
use crate::backbone::{resolve_layer_index, BackboneConfig, LayerTrace, Projection, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::{kaiming_uniform, stream, Stream};

static EXTRACT_CALLS: AtomicUsize = AtomicUsize::new(0);
static INJECT_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide counts of `(extract_echo, compute_injection)` calls.
/// Used to prove that evaluation never touches the echo path.
pub fn call_counts() -> (usize, usize) {
    (EXTRACT_CALLS.load(Ordering::Relaxed), INJECT_CALLS.load(Ordering::Relaxed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EchoConfig {
    /// Negative values count from the last layer.
    pub source_layers: Vec<i64>,
    pub target_layers: Vec<i64>,
    pub target_projections: Vec<Projection>,
    pub bottleneck_dim: usize,
    pub gate_bias_init: f64,
    pub lambda_init: f64,
    /// Inject only at supervised positions; when false every position is injected.
    pub answer_only_mask: bool,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig {
            source_layers: vec![-4, -3],
            target_layers: vec![2, 3],
            target_projections: vec![Projection::Q, Projection::V],
            bottleneck_dim: 64,
            gate_bias_init: -2.0,
            lambda_init: 1.0,
            answer_only_mask: true,
        }
    }
}

/// Source and target layers after index resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLayers {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EchoConfig {
    pub fn resolve(&self, n_layers: usize) -> Result<ResolvedLayers> {
        if self.source_layers.is_empty() || self.target_layers.is_empty() || self.target_projections.is_empty() {
            return Err(Error::Config("echo source layers, target layers and projections must be non-empty".into()));
        }
        if self.bottleneck_dim == 0 {
            return Err(Error::Config("echo bottleneck_dim must be at least 1".into()));
        }
        let resolve = |xs: &[i64]| -> Result<Vec<usize>> {
            let mut out = xs.iter().map(|&i| resolve_layer_index(i, n_layers)).collect::<Result<Vec<_>>>()?;
            out.sort_unstable();
            if out.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Config(format!("duplicate layer in {xs:?}")));
            }
            Ok(out)
        };
        let sources = resolve(&self.source_layers)?;
        let targets = resolve(&self.target_layers)?;
        if sources[0] <= *targets.last().expect("non-empty") {
            return Err(Error::Config(format!(
                "echo source layers {sources:?} must all be deeper than target layers {targets:?}"
            )));
        }
        Ok(ResolvedLayers { sources, targets })
    }
}

/// Projection and gating parameters for one (target layer, projection).
#[derive(Debug, Clone)]
pub struct EchoModuleParams {
    /// `[bottleneck × d_model]`
    pub w1: Tensor,
    /// `[d_out × bottleneck]`
    pub w2: Tensor,
    /// `[bottleneck × d_model]`
    pub u1: Tensor,
    /// `[d_out × bottleneck]`
    pub u2: Tensor,
    /// `[d_out]`
    pub b: Tensor,
    /// `[1]`
    pub lambda: Tensor,
}

impl EchoModuleParams {
    fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("W1", &self.w1),
            ("W2", &self.w2),
            ("U1", &self.u1),
            ("U2", &self.u2),
            ("b", &self.b),
            ("lambda", &self.lambda),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("W1", &mut self.w1),
            ("W2", &mut self.w2),
            ("U1", &mut self.u1),
            ("U2", &mut self.u2),
            ("b", &mut self.b),
            ("lambda", &mut self.lambda),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// All echo modules of a model plus the resolved layer bands.
#[derive(Debug, Clone)]
pub struct EchoModules {
    pub config: EchoConfig,
    pub layers: ResolvedLayers,
    modules: BTreeMap<(usize, Projection), EchoModuleParams>,
}

/// `W1`, `U1` Kaiming-uniform; `W2`, `U2` zero; `b = gate_bias_init`; `lambda = lambda_init`.
pub fn init_echo_params(config: &EchoConfig, backbone: &BackboneConfig, seed: u64) -> Result<EchoModules> {
    let layers = config.resolve(backbone.n_layers)?;
    let (d, bn) = (backbone.d_model, config.bottleneck_dim);
    let mut rng = stream(seed, Stream::EchoInit);
    let mut modules = BTreeMap::new();
    for &l in &layers.targets {
        for &p in &config.target_projections {
            let params = EchoModuleParams {
                w1: Tensor::new(&[bn, d], kaiming_uniform(&mut rng, bn * d, d))?.into_param(),
                w2: Tensor::zeros(&[d, bn]).into_param(),
                u1: Tensor::new(&[bn, d], kaiming_uniform(&mut rng, bn * d, d))?.into_param(),
                u2: Tensor::zeros(&[d, bn]).into_param(),
                b: Tensor::filled(&[d], config.gate_bias_init).into_param(),
                lambda: Tensor::new(&[1], vec![config.lambda_init])?.into_param(),
            };
            modules.insert((l, p), params);
        }
    }
    Ok(EchoModules { config: config.clone(), layers, modules })
}

impl EchoModules {
    pub fn get(&self, layer: usize, proj: Projection) -> Option<&EchoModuleParams> {
        self.modules.get(&(layer, proj))
    }

    pub fn get_mut(&mut self, layer: usize, proj: Projection) -> Option<&mut EchoModuleParams> {
        self.modules.get_mut(&(layer, proj))
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, Projection)> + '_ {
        self.modules.keys().copied()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (&(l, p), m) in &self.modules {
            for (suffix, t) in m.named() {
                out.push((format!("echo.{l}.{p}.{suffix}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (&(l, p), m) in self.modules.iter_mut() {
            for (suffix, t) in m.named_mut() {
                out.push((format!("echo.{l}.{p}.{suffix}"), t));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.modules.values().map(EchoModuleParams::parameter_count).sum()
    }

    /// Rebuilds modules for `config` from named tensors.
    pub fn from_named(
        config: &EchoConfig,
        backbone: &BackboneConfig,
        mut take: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut out = init_echo_params(config, backbone, 0)?;
        for (&(l, p), m) in out.modules.iter_mut() {
            for (suffix, slot) in m.named_mut() {
                let name = format!("echo.{l}.{p}.{suffix}");
                let t = take(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.into_param();
            }
        }
        Ok(out)
    }
}

/// Index of the last unsupervised position before the answer span.
pub fn find_boundary(labels: &[i64]) -> Result<usize> {
    let first = labels
        .iter()
        .position(|&y| y != IGNORE_INDEX)
        .ok_or_else(|| Error::Data("row has no supervised label".into()))?;
    if first == 0 {
        return Err(Error::Data("answer starts at position 0; no boundary exists".into()));
    }
    let len = labels[first..].iter().take_while(|&&y| y != IGNORE_INDEX).count();
    if labels[first + len..].iter().any(|&y| y != IGNORE_INDEX) {
        return Err(Error::Data("supervised labels are not contiguous".into()));
    }
    Ok(first - 1)
}

/// `true` exactly where the label is supervised.
pub fn build_answer_mask(labels: &[i64]) -> Vec<bool> {
    labels.iter().map(|&y| y != IGNORE_INDEX).collect()
}

/// Mean of the source-layer block outputs at `t_star`, detached. Shape `[1 × d_model]`.
pub fn extract_echo(g: &mut Graph<'_>, trace: &LayerTrace, sources: &[usize], t_star: usize) -> Result<Var> {
    if sources.is_empty() {
        return Err(Error::Config("echo needs at least one source layer".into()));
    }
    EXTRACT_CALLS.fetch_add(1, Ordering::Relaxed);
    let mut acc: Option<Var> = None;
    for &l in sources {
        let h = trace.block_output(l).ok_or_else(|| Error::Config(format!("source layer {l} not in trace")))?;
        let t = g.shape(h)[0];
        if t_star >= t {
            return Err(Error::Data(format!("boundary {t_star} outside sequence of length {t}")));
        }
        let row = g.gather_rows(h, &[t_star])?;
        acc = Some(match acc {
            Some(a) => g.add(a, row)?,
            None => row,
        });
    }
    let sum = acc.expect("non-empty sources");
    let z = if sources.len() == 1 { sum } else { g.scale(sum, 1.0 / sources.len() as f64) };
    Ok(g.detach(z))
}

/// Parameter-free RMS normalization of the echo vector.
pub fn normalize_echo(g: &mut Graph<'_>, z: Var) -> Var {
    g.rms_norm_rows(z, NORM_EPS)
}

/// Injection vector and gate activations for one module.
#[derive(Debug, Clone, Copy)]
pub struct Injection {
    /// `[1 × d_out]`
    pub delta: Var,
    /// `[1 × d_out]`, every entry in (0, 1).
    pub gate: Var,
}

/// `delta = lambda · (W2·tanh(W1·z̄)) ⊙ sigmoid(U2·tanh(U1·z̄) + b)` for a normalized echo `z̄`.
pub fn compute_injection<'a>(g: &mut Graph<'a>, z_bar: Var, p: &'a EchoModuleParams) -> Result<Injection> {
    INJECT_CALLS.fetch_add(1, Ordering::Relaxed);
    let (w1, w2, u1, u2) = (g.tensor(&p.w1), g.tensor(&p.w2), g.tensor(&p.u1), g.tensor(&p.u2));
    let b = g.tensor(&p.b);
    let lambda = g.tensor(&p.lambda);
    let h = g.matmul_bt(z_bar, w1)?;
    let h = g.tanh(h);
    let e = g.matmul_bt(h, w2)?;
    let k = g.matmul_bt(z_bar, u1)?;
    let k = g.tanh(k);
    let pre = g.matmul_bt(k, u2)?;
    let d_out = p.b.numel();
    let b = g.reshape(b, &[1, d_out])?;
    let pre = g.add(pre, b)?;
    let gate = g.sigmoid(pre);
    let eg = g.mul(e, gate)?;
    let delta = g.mul(eg, lambda)?;
    Ok(Injection { delta, gate })
}

/// `o[t] + route·mask[t]·delta`; returns `o` itself when routed off.
pub fn inject(g: &mut Graph<'_>, o: Var, delta: Var, mask: &[bool], route: bool) -> Result<Var> {
    if !route {
        return Ok(o);
    }
    g.add_row_masked(o, delta, mask)
}

/// Per-sample state shared by every target module in an Echo-on pass.
#[derive(Debug, Clone)]
pub struct InjectionContext {
    /// Normalized, detached echo `[1 × d_model]`.
    pub echo: Var,
    pub mask: Vec<bool>,
    pub route: bool,
}

/// Echo modules paired with the context of the sample being processed.
#[derive(Debug, Clone, Copy)]
pub struct EchoInjection<'a, 'c> {
    pub modules: &'a EchoModules,
    pub ctx: &'c InjectionContext,
}

impl<'a> EchoInjection<'a, '_> {
    pub fn module(&self, layer: usize, proj: Projection) -> Option<&'a EchoModuleParams> {
        self.modules.get(layer, proj)
    }

    pub fn validate(&self, n_layers: usize, seq_len: usize) -> Result<()> {
        if let Some((l, p)) = self.modules.keys().find(|&(l, _)| l >= n_layers) {
            return Err(Error::Config(format!("echo target {l}.{p} outside {n_layers} layers")));
        }
        if self.ctx.mask.len() != seq_len {
            return Err(Error::Data(format!(
                "answer mask length {} does not match sequence length {seq_len}",
                self.ctx.mask.len()
            )));
        }
        Ok(())
    }
}
