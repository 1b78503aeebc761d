//! LoRA and DoRA reparameterizations of the attention projections.
//!
//! A LoRA module adds `(alpha/rank)·B·A` to a frozen `W`; a DoRA module
//! additionally splits the combined matrix into a trainable per-row magnitude
//! and a unit-norm direction. Both start out exactly equal to the frozen
//! projection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::{FrozenWeights, Projection};
use crate::error::{Error, Result};
use crate::rng::{derive, kaiming_uniform, stream, Stream};

/// Guard for zero-norm rows in the DoRA direction.
pub const DORA_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Dora,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Dora => "dora",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "dora" => Ok(AdapterKind::Dora),
            _ => Err(Error::Config(format!("unknown adapter kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub projections: Vec<Projection>,
    /// Layers to adapt; empty means every layer.
    pub layers: Vec<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            kind: AdapterKind::Lora,
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            projections: Projection::ALL.to_vec(),
            layers: Vec::new(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha / self.rank as f64).is_finite() {
            return Err(Error::Config(format!("alpha {} gives a non-finite scale", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.projections.is_empty() {
            return Err(Error::Config("adapter projections must not be empty".into()));
        }
        Ok(())
    }

    /// Rank clamped to the smaller matrix dimension, with a warning when it had to shrink.
    pub fn effective_rank(&self, d_in: usize, d_out: usize) -> usize {
        let cap = d_in.min(d_out);
        if self.rank > cap {
            log::warn!("adapter rank {} exceeds min(d_in, d_out) = {cap}; using {cap}", self.rank);
            cap
        } else {
            self.rank
        }
    }
}

/// Dropout applied to the low-rank branch input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dropout {
    Off,
    /// The seed identifies the (step, sample); each module derives its own mask from it.
    Seeded(u64),
}

impl Dropout {
    /// Inverted-dropout keep mask with drop probability `p` for one module, or `None` when disabled.
    pub fn mask(&self, p: f64, layer: usize, proj: Projection, rows: usize, cols: usize) -> Option<Vec<f64>> {
        match *self {
            Dropout::Seeded(seed) if p > 0.0 => {
                let mut rng = stream(derive(seed, &[layer as u64, proj as u64]), Stream::Dropout);
                let keep = 1.0 / (1.0 - p);
                Some((0..rows * cols).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoraParams {
    /// `[rank × d_in]`
    pub a: Tensor,
    /// `[d_out × rank]`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraParams {
    pub fn new(a: Tensor, b: Tensor, alpha: f64, dropout: f64) -> Result<Self> {
        let (&[rank, d_in], &[d_out, rb]) = (a.shape(), b.shape()) else {
            return Err(Error::dim("lora", a.shape(), b.shape()));
        };
        if rank != rb {
            return Err(Error::dim("lora", a.shape(), b.shape()));
        }
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {rank} outside 1..={} for a {d_out}x{d_in} projection",
                d_in.min(d_out)
            )));
        }
        if !(alpha / rank as f64).is_finite() {
            return Err(Error::Config(format!("alpha {alpha} gives a non-finite scale")));
        }
        Ok(LoraParams { a, b, rank, alpha, dropout })
    }

    /// Kaiming-uniform `A`, zero `B`.
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64, dropout: f64) -> Result<Self> {
        let a = Tensor::new(&[rank, d_in], kaiming_uniform(rng, rank * d_in, d_in))?.into_param();
        let b = Tensor::zeros(&[d_out, rank]).into_param();
        LoraParams::new(a, b, alpha, dropout)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `scale·B·A`.
    pub fn delta(&self) -> Vec<f64> {
        let (d_out, d_in, r) = (self.b.shape()[0], self.a.shape()[1], self.rank);
        let (a, b, s) = (self.a.data(), self.b.data(), self.scale());
        let mut out = vec![0.0; d_out * d_in];
        for i in 0..d_out {
            for k in 0..r {
                let bik = s * b[i * r + k];
                if bik == 0.0 {
                    continue;
                }
                for (o, &akj) in out[i * d_in..(i + 1) * d_in].iter_mut().zip(&a[k * d_in..(k + 1) * d_in]) {
                    *o += bik * akj;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DoraParams {
    /// `[d_out]`, initialized to the row norms of the frozen weight.
    pub magnitude: Tensor,
    pub lora: LoraParams,
}

impl DoraParams {
    pub fn init(rng: &mut impl Rng, w: &Tensor, rank: usize, alpha: f64) -> Result<Self> {
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        let lora = LoraParams::init(rng, d_in, d_out, rank, alpha, 0.0)?;
        let magnitude = Tensor::new(&[d_out], row_norms(w.data(), d_in))?.into_param();
        Ok(DoraParams { magnitude, lora })
    }
}

fn row_norms(data: &[f64], cols: usize) -> Vec<f64> {
    data.chunks(cols).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

#[derive(Debug, Clone)]
pub enum Adapter {
    Lora(LoraParams),
    Dora(DoraParams),
}

impl Adapter {
    pub fn lora(&self) -> &LoraParams {
        match self {
            Adapter::Lora(p) => p,
            Adapter::Dora(p) => &p.lora,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Adapter::Lora(p) => vec![("A", &p.a), ("B", &p.b)],
            Adapter::Dora(p) => vec![("A", &p.lora.a), ("B", &p.lora.b), ("m", &p.magnitude)],
        }
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Adapter::Lora(p) => vec![("A", &mut p.a), ("B", &mut p.b)],
            Adapter::Dora(p) => vec![("A", &mut p.lora.a), ("B", &mut p.lora.b), ("m", &mut p.magnitude)],
        }
    }
}

/// `u·Wᵀ + scale·(drop(u)·Aᵀ)·Bᵀ`.
pub fn lora_forward<'a>(
    g: &mut Graph<'a>,
    w: Var,
    p: &'a LoraParams,
    u: Var,
    drop_mask: Option<Vec<f64>>,
) -> Result<Var> {
    let base = g.matmul_bt(u, w)?;
    let a = g.tensor(&p.a);
    let b = g.tensor(&p.b);
    let ud = match drop_mask {
        Some(mask) => {
            let shape = g.shape(u).to_vec();
            let m = g.constant(&shape, mask)?;
            g.mul(u, m)?
        }
        None => u,
    };
    let low = g.matmul_bt(ud, a)?;
    let low = g.matmul_bt(low, b)?;
    let low = g.scale(low, p.scale());
    g.add(base, low)
}

/// `u·(m ⊙ normalize_rows(W + scale·B·A))ᵀ`.
pub fn dora_forward<'a>(g: &mut Graph<'a>, w: Var, p: &'a DoraParams, u: Var) -> Result<Var> {
    let a = g.tensor(&p.lora.a);
    let b = g.tensor(&p.lora.b);
    let m = g.tensor(&p.magnitude);
    let ba = g.matmul(b, a)?;
    let ba = g.scale(ba, p.lora.scale());
    let combined = g.add(w, ba)?;
    let direction = g.normalize_rows(combined, DORA_NORM_EPS);
    let weight = g.scale_rows(direction, m)?;
    g.matmul_bt(u, weight)
}

/// `W + scale·B·A`.
pub fn merge_lora(w: &Tensor, p: &LoraParams) -> Result<Tensor> {
    let expected = [p.b.shape()[0], p.a.shape()[1]];
    if w.shape() != expected {
        return Err(Error::dim("merge_lora", w.shape(), &expected));
    }
    let data = w.data().iter().zip(p.delta()).map(|(x, d)| x + d).collect();
    Tensor::new(w.shape(), data)
}

/// Explicit `m ⊙ normalize_rows(W + scale·B·A)`.
pub fn merge_dora(w: &Tensor, p: &DoraParams) -> Result<Tensor> {
    let combined = merge_lora(w, &p.lora)?;
    let cols = w.shape()[1];
    let norms = row_norms(combined.data(), cols);
    let mut data = combined.into_data();
    for (i, row) in data.chunks_mut(cols).enumerate() {
        let s = p.magnitude.data()[i] / norms[i].max(DORA_NORM_EPS);
        row.iter_mut().for_each(|x| *x *= s);
    }
    Tensor::new(w.shape(), data)
}

/// Adapter modules keyed by (layer, projection).
#[derive(Debug, Clone, Default)]
pub struct AdapterSet {
    modules: BTreeMap<(usize, Projection), Adapter>,
}

impl AdapterSet {
    /// An empty set: every projection runs frozen.
    pub fn empty() -> Self {
        AdapterSet::default()
    }

    pub fn init(config: &AdapterConfig, weights: &FrozenWeights, seed: u64) -> Result<Self> {
        config.validate()?;
        let n_layers = weights.config.n_layers;
        let layers: Vec<usize> = if config.layers.is_empty() { (0..n_layers).collect() } else { config.layers.clone() };
        let mut rng = stream(seed, Stream::AdapterInit);
        let mut set = AdapterSet::empty();
        for &l in &layers {
            if l >= n_layers {
                return Err(Error::Config(format!("adapter layer {l} out of range for {n_layers} layers")));
            }
            for &p in &config.projections {
                let w = weights.projection(l, p);
                let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
                let rank = config.effective_rank(d_in, d_out);
                let adapter = match config.kind {
                    AdapterKind::Lora => {
                        Adapter::Lora(LoraParams::init(&mut rng, d_in, d_out, rank, config.alpha, config.dropout)?)
                    }
                    AdapterKind::Dora => Adapter::Dora(DoraParams::init(&mut rng, w, rank, config.alpha)?),
                };
                set.insert(l, p, adapter)?;
            }
        }
        Ok(set)
    }

    pub fn insert(&mut self, layer: usize, proj: Projection, adapter: Adapter) -> Result<()> {
        if self.modules.contains_key(&(layer, proj)) {
            return Err(Error::Config(format!("duplicate adapter for layer {layer} projection {proj}")));
        }
        self.modules.insert((layer, proj), adapter);
        Ok(())
    }

    pub fn get(&self, layer: usize, proj: Projection) -> Option<&Adapter> {
        self.modules.get(&(layer, proj))
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

    /// Output of projection `proj` in `layer` for input rows `u`.
    pub fn project<'a>(
        &'a self,
        g: &mut Graph<'a>,
        layer: usize,
        proj: Projection,
        w: &'a Tensor,
        u: Var,
        dropout: Dropout,
    ) -> Result<Var> {
        let wv = g.tensor(w);
        match self.modules.get(&(layer, proj)) {
            None => g.matmul_bt(u, wv),
            Some(Adapter::Lora(p)) => {
                let mask = dropout.mask(p.dropout, layer, proj, g.shape(u)[0], w.shape()[1]);
                lora_forward(g, wv, p, u, mask)
            }
            Some(Adapter::Dora(p)) => dora_forward(g, wv, p, u),
        }
    }

    /// Frozen weights with every adapter folded in.
    pub fn merge_into(&self, weights: &FrozenWeights) -> Result<FrozenWeights> {
        let mut merged = weights.clone();
        for (&(l, p), adapter) in &self.modules {
            let w = weights.projection(l, p);
            let folded = match adapter {
                Adapter::Lora(lp) => merge_lora(w, lp)?,
                Adapter::Dora(dp) => merge_dora(w, dp)?,
            };
            *merged.layers[l].projection_mut(p) = folded;
        }
        Ok(merged)
    }

    /// Trainable tensors under their checkpoint names (`adapter.*`).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (&(l, p), adapter) in &self.modules {
            for (suffix, t) in adapter.named() {
                out.push((format!("adapter.{l}.{p}.{suffix}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (&(l, p), adapter) in self.modules.iter_mut() {
            for (suffix, t) in adapter.named_mut() {
                out.push((format!("adapter.{l}.{p}.{suffix}"), t));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds the set described by `config` from named tensors.
    pub fn from_named(
        config: &AdapterConfig,
        weights: &FrozenWeights,
        mut take: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let template = AdapterSet::init(config, weights, 0)?;
        let mut set = AdapterSet::empty();
        for (&(l, p), adapter) in &template.modules {
            let mut get = |suffix: &str, like: &Tensor| -> Result<Tensor> {
                let name = format!("adapter.{l}.{p}.{suffix}");
                let t = take(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape() != like.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        like.shape()
                    )));
                }
                Ok(t.into_param())
            };
            let rebuilt = match adapter {
                Adapter::Lora(lp) => {
                    Adapter::Lora(LoraParams::new(get("A", &lp.a)?, get("B", &lp.b)?, lp.alpha, lp.dropout)?)
                }
                Adapter::Dora(dp) => Adapter::Dora(DoraParams {
                    lora: LoraParams::new(get("A", &dp.lora.a)?, get("B", &dp.lora.b)?, dp.lora.alpha, 0.0)?,
                    magnitude: get("m", &dp.magnitude)?,
                }),
            };
            set.modules.insert((l, p), rebuilt);
        }
        Ok(set)
    }
}

/// Drops every `echo.*` entry; errors if a tensor the adapters need is absent.
pub fn strip_echo<T>(tensors: BTreeMap<String, T>, required: &[String]) -> Result<BTreeMap<String, T>> {
    if let Some(missing) = required.iter().find(|n| !tensors.contains_key(n.as_str())) {
        return Err(Error::Checkpoint(format!("missing adapter tensor {missing}")));
    }
    Ok(tensors.into_iter().filter(|(name, _)| !name.starts_with("echo.")).collect())
}
