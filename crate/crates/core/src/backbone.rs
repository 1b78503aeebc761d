//! Frozen decoder-only transformer used as the adaptation target.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention, a
//! SiLU-gated feed-forward and learned absolute positions. The four attention
//! projections are the attachment points for adapters and echo injection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, Dropout};
use crate::autodiff::{Graph, Tensor, Var};
use crate::echo::{self, EchoInjection};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream, Stream};

/// Std of the Gaussian used for every projection matrix.
pub const PROJECTION_STD: f64 = 0.02;
/// Token and position embeddings sit an order of magnitude above the projections
/// so token identity survives the frozen random blocks.
pub const EMBEDDING_STD: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { n_layers: 12, d_model: 64, n_heads: 4, d_ff: 192, vocab_size: 64, max_seq_len: 64, seed: 0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers < 4 {
            return fail(format!("n_layers must be at least 4, got {}", self.n_layers));
        }
        if self.max_seq_len < 8 {
            return fail(format!("max_seq_len must be at least 8, got {}", self.max_seq_len));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size must be at least 4, got {}", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One of the four attention projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_end_matches("_proj") {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            _ => Err(Error::Config(format!("unknown projection {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("q", &self.wq),
            ("k", &self.wk),
            ("v", &self.wv),
            ("o", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("ffn_gate", &self.w_gate),
            ("ffn_up", &self.w_up),
            ("ffn_down", &self.w_down),
        ]
    }
}

/// Backbone weights. Never trainable: every tensor has `requires_grad == false`.
#[derive(Debug, Clone)]
pub struct FrozenWeights {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

pub fn init_backbone(config: &BackboneConfig) -> Result<FrozenWeights> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Backbone);
    let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut gaussian = |shape: &[usize], std: f64| {
        let n = shape.iter().product();
        Tensor::new(shape, normal_vec(&mut rng, n, std)).expect("shape matches")
    };
    let tok_emb = gaussian(&[v, d], EMBEDDING_STD);
    let pos_emb = gaussian(&[config.max_seq_len, d], EMBEDDING_STD);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: Tensor::filled(&[d], 1.0),
            wq: gaussian(&[d, d], PROJECTION_STD),
            wk: gaussian(&[d, d], PROJECTION_STD),
            wv: gaussian(&[d, d], PROJECTION_STD),
            wo: gaussian(&[d, d], PROJECTION_STD),
            ffn_norm: Tensor::filled(&[d], 1.0),
            w_gate: gaussian(&[ff, d], PROJECTION_STD),
            w_up: gaussian(&[ff, d], PROJECTION_STD),
            w_down: gaussian(&[d, ff], PROJECTION_STD),
        });
    }
    let lm_head = gaussian(&[v, d], 1.0 / (d as f64).sqrt());
    Ok(FrozenWeights {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        final_norm: Tensor::filled(&[d], 1.0),
        lm_head,
    })
}

impl FrozenWeights {
    pub fn projection(&self, layer: usize, p: Projection) -> &Tensor {
        self.layers[layer].projection(p)
    }

    /// Tensors under their checkpoint names (`backbone.*`), in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out =
            vec![("backbone.tok_emb".to_string(), &self.tok_emb), ("backbone.pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("backbone.{l}.{name}"), t));
            }
        }
        out.push(("backbone.final_norm".to_string(), &self.final_norm));
        out.push(("backbone.lm_head".to_string(), &self.lm_head));
        out
    }

    /// Rebuilds weights from named tensors; shapes are checked against `config`.
    pub fn from_named(config: &BackboneConfig, mut take: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut get = |name: String, shape: &[usize]| -> Result<Tensor> {
            let mut t = take(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            t.set_requires_grad(false);
            Ok(t)
        };
        let tok_emb = get("backbone.tok_emb".into(), &[v, d])?;
        let pos_emb = get("backbone.pos_emb".into(), &[config.max_seq_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: get(format!("backbone.{l}.attn_norm"), &[d])?,
                wq: get(format!("backbone.{l}.q"), &[d, d])?,
                wk: get(format!("backbone.{l}.k"), &[d, d])?,
                wv: get(format!("backbone.{l}.v"), &[d, d])?,
                wo: get(format!("backbone.{l}.o"), &[d, d])?,
                ffn_norm: get(format!("backbone.{l}.ffn_norm"), &[d])?,
                w_gate: get(format!("backbone.{l}.ffn_gate"), &[ff, d])?,
                w_up: get(format!("backbone.{l}.ffn_up"), &[ff, d])?,
                w_down: get(format!("backbone.{l}.ffn_down"), &[d, ff])?,
            });
        }
        Ok(FrozenWeights {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: get("backbone.final_norm".into(), &[d])?,
            lm_head: get("backbone.lm_head".into(), &[v, d])?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Hidden states of one forward pass: index 0 is the embedding output,
/// index `l + 1` is the output of block `l` (post-residual).
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub hidden: Vec<Var>,
}

impl LayerTrace {
    /// Output of block `layer`.
    pub fn block_output(&self, layer: usize) -> Option<Var> {
        self.hidden.get(layer + 1).copied()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub trace: LayerTrace,
    /// Gate activations of every injected module, in evaluation order.
    pub gates: Vec<Var>,
}

/// Maps a possibly negative layer index onto `0..n_layers`.
pub fn resolve_layer_index(idx: i64, n_layers: usize) -> Result<usize> {
    let n = n_layers as i64;
    if idx < -n || idx >= n {
        return Err(Error::Config(format!("layer index {idx} out of range for {n_layers} layers")));
    }
    Ok(if idx < 0 { (n + idx) as usize } else { idx as usize })
}

/// Runs the backbone with adapters on `tokens`. Without `echo` this is the
/// Echo-off path; with it, the target projections receive the gated injection.
pub fn forward<'a>(
    g: &mut Graph<'a>,
    weights: &'a FrozenWeights,
    adapters: &'a AdapterSet,
    tokens: &[usize],
    echo: Option<&EchoInjection<'a, '_>>,
    dropout: Dropout,
) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    let t = tokens.len();
    if t == 0 || t > cfg.max_seq_len {
        return Err(Error::Data(format!("sequence length {t} outside 1..={}", cfg.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= cfg.vocab_size) {
        return Err(Error::Data(format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(inj) = echo {
        inj.validate(cfg.n_layers, t)?;
    }

    let tok = g.tensor(&weights.tok_emb);
    let pos = g.tensor(&weights.pos_emb);
    let positions: Vec<usize> = (0..t).collect();
    let te = g.gather_rows(tok, tokens)?;
    let pe = g.gather_rows(pos, &positions)?;
    let mut x = g.add(te, pe)?;

    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(x);
    let mut gates = Vec::new();
    let head_dim = cfg.head_dim();
    let score_scale = 1.0 / (head_dim as f64).sqrt();

    for (l, layer) in weights.layers.iter().enumerate() {
        let mut project = |g: &mut Graph<'a>, p: Projection, u: Var| -> Result<Var> {
            let o = adapters.project(g, l, p, layer.projection(p), u, dropout)?;
            match echo.and_then(|inj| inj.module(l, p)) {
                Some(module) => {
                    let inj = echo.expect("module implies injection");
                    let injection = echo::compute_injection(g, inj.ctx.echo, module)?;
                    gates.push(injection.gate);
                    echo::inject(g, o, injection.delta, &inj.ctx.mask, inj.ctx.route)
                }
                None => Ok(o),
            }
        };

        let gain = g.tensor(&layer.attn_norm);
        let h = g.rms_norm_rows(x, NORM_EPS);
        let h = g.scale_cols(h, gain)?;
        let q = project(g, Projection::Q, h)?;
        let k = project(g, Projection::K, h)?;
        let v = project(g, Projection::V, h)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let start = head * head_dim;
            let qh = g.slice_cols(q, start, head_dim)?;
            let kh = g.slice_cols(k, start, head_dim)?;
            let vh = g.slice_cols(v, start, head_dim)?;
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, score_scale);
            let attn = g.causal_softmax_rows(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        let a = project(g, Projection::O, merged)?;
        x = g.add(x, a)?;

        let gain = g.tensor(&layer.ffn_norm);
        let h = g.rms_norm_rows(x, NORM_EPS);
        let h = g.scale_cols(h, gain)?;
        let w_gate = g.tensor(&layer.w_gate);
        let w_up = g.tensor(&layer.w_up);
        let w_down = g.tensor(&layer.w_down);
        let gate = g.matmul_bt(h, w_gate)?;
        let gate = g.silu(gate);
        let up = g.matmul_bt(h, w_up)?;
        let inner = g.mul(gate, up)?;
        let f = g.matmul_bt(inner, w_down)?;
        x = g.add(x, f)?;
        hidden.push(x);
    }

    let gain = g.tensor(&weights.final_norm);
    let h = g.rms_norm_rows(x, NORM_EPS);
    let h = g.scale_cols(h, gain)?;
    let head = g.tensor(&weights.lm_head);
    let logits = g.matmul_bt(h, head)?;
    Ok(ForwardOutput { logits, trace: LayerTrace { hidden }, gates })
}
