//! Two-pass training step: Echo-off loss and echo extraction, a routed
//! Echo-on pass, masked distillation from the Echo-on teacher, and an AdamW
//! update of the trainable tensors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::adapters::Dropout;
use crate::autodiff::{Graph, MaskedLoss, Tensor, Var, IGNORE_INDEX};
use crate::data::{Batch, EncodedRow};
use crate::echo::{extract_echo, normalize_echo, InjectionContext};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::derive;
use crate::routing::Router;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_kd: f64,
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { lambda_kd: 1.0, tau: 2.0, lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_kd >= 0.0) {
            return Err(Error::Config(format!("lambda_kd must be non-negative, got {}", self.lambda_kd)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// `(τ²/|A|)·Σ KL(softmax(teacher/τ) ‖ softmax(student/τ))` over the rows in
/// `positions`. The teacher is detached here, so only `student` receives gradient.
pub fn kd_loss(g: &mut Graph<'_>, teacher: Var, student: Var, positions: &[usize], tau: f64) -> Result<MaskedLoss> {
    if positions.is_empty() {
        let loss = g.constant(&[1], vec![0.0])?;
        return Ok(MaskedLoss { loss, count: 0 });
    }
    let teacher = g.detach(teacher);
    let t_rows = g.gather_rows(teacher, positions)?;
    let s_rows = g.gather_rows(student, positions)?;
    let p = g.softmax_rows(t_rows, tau)?;
    let q = g.softmax_rows(s_rows, tau)?;
    let kl = g.kl_rows(p, q)?;
    let total = g.sum(kl);
    let loss = g.scale(total, tau * tau / positions.len() as f64);
    Ok(MaskedLoss { loss, count: positions.len() })
}

/// Logit rows whose next-token label is supervised.
pub fn supervised_positions(shifted_labels: &[i64]) -> Vec<usize> {
    shifted_labels.iter().enumerate().filter(|(_, &y)| y != IGNORE_INDEX).map(|(i, _)| i).collect()
}

/// Per-sample dropout for step `k`, shared by both passes of that sample.
pub fn sample_dropout(dropout_seed: Option<u64>, step: usize, index: usize) -> Dropout {
    match dropout_seed {
        Some(seed) => Dropout::Seeded(derive(seed, &[step as u64, index as u64])),
        None => Dropout::Off,
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub off: f64,
    pub on: Option<f64>,
    pub kd: Option<f64>,
    pub total: f64,
    pub gate_mean: Option<f64>,
    /// Echo-on logits `[T × V]` per sample, when the echo pass ran.
    pub teacher_logits: Option<Vec<Vec<f64>>>,
    /// Raw boundary echo `[d_model]` per sample, when the echo pass ran.
    pub echoes: Option<Vec<Vec<f64>>>,
}

/// Source of the two values the gradient treats as constants: the boundary
/// echo and the Echo-on teacher.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'t> {
    /// Computed from the current parameters and detached.
    Live,
    /// Supplied per sample. Finite differences of the loss under fixed values
    /// describe the same function that the detached gradient differentiates.
    Fixed { echoes: &'t [Vec<f64>], logits: &'t [Vec<f64>] },
}

/// Builds the batch loss, accumulates gradients into the model's trainable
/// tensors and returns the loss components. Grad buffers are not zeroed here.
pub fn accumulate_batch_gradients(
    model: &mut Model,
    batch: &Batch,
    route: bool,
    config: &ObjectiveConfig,
    dropout: impl Fn(usize) -> Dropout,
    teacher: Teacher<'_>,
) -> Result<LossBreakdown> {
    config.validate()?;
    let n_supervised = batch.supervised_count();
    if n_supervised == 0 {
        return Err(Error::Data("batch has no supervised positions".into()));
    }
    if route && model.echo.is_none() {
        return Err(Error::Config("routing enabled but the model has no echo modules".into()));
    }
    let mut sums = (0.0, 0.0, 0.0);
    let mut gate_sum = 0.0;
    let mut gate_count = 0usize;
    let mut teacher_logits = Vec::new();
    let mut echoes = Vec::new();
    let mut grads = Vec::with_capacity(batch.len());
    for (index, row) in batch.rows.iter().enumerate() {
        let fixed = match teacher {
            Teacher::Fixed { echoes, logits } if route => {
                let missing = || Error::Usage(format!("no fixed echo/teacher for sample {index}"));
                Some((echoes.get(index).ok_or_else(missing)?, logits.get(index).ok_or_else(missing)?))
            }
            _ => None,
        };
        let sample = sample_loss(model, row, route, config, dropout(index), n_supervised, fixed)?;
        sums.0 += sample.off;
        if let Some((on, kd)) = sample.on_kd {
            sums.1 += on;
            sums.2 += kd;
        }
        gate_sum += sample.gate_sum;
        gate_count += sample.gate_count;
        if let Some(t) = sample.teacher {
            teacher_logits.push(t);
        }
        if let Some(z) = sample.echo {
            echoes.push(z);
        }
        grads.push(sample.grads);
    }
    // Gradients are applied only once every sample's loss is known to be finite.
    for sample_grads in grads {
        for (name, t) in model.trainable_tensors_mut() {
            if let Some(g) = sample_grads.get(&name) {
                t.accumulate_grad(g)?;
            }
        }
    }
    let (off, on, kd) = sums;
    let total = if route { off + (on + config.lambda_kd * kd) } else { off };
    Ok(LossBreakdown {
        off,
        on: route.then_some(on),
        kd: route.then_some(kd),
        total,
        gate_mean: (gate_count > 0).then(|| gate_sum / gate_count as f64),
        teacher_logits: route.then_some(teacher_logits),
        echoes: route.then_some(echoes),
    })
}

struct SampleLoss {
    off: f64,
    on_kd: Option<(f64, f64)>,
    gate_sum: f64,
    gate_count: usize,
    teacher: Option<Vec<f64>>,
    echo: Option<Vec<f64>>,
    grads: HashMap<String, Vec<f64>>,
}

fn sample_loss(
    model: &Model,
    row: &EncodedRow,
    route: bool,
    config: &ObjectiveConfig,
    dropout: Dropout,
    n_supervised: usize,
    fixed: Option<(&Vec<f64>, &Vec<f64>)>,
) -> Result<SampleLoss> {
    let labels = row.shifted_labels();
    let positions = supervised_positions(&labels);
    let weight = positions.len() as f64 / n_supervised as f64;

    let mut g = Graph::new();
    let off_pass = model.forward(&mut g, &row.tokens, None, dropout)?;
    let ce_off = g.masked_cross_entropy(off_pass.logits, &labels)?;
    let off_term = g.scale(ce_off.loss, weight);
    let off = g.scalar(off_term);

    let mut on_kd = None;
    let mut gate_sum = 0.0;
    let mut gate_count = 0;
    let mut teacher = None;
    let mut echo_value = None;
    let loss = if let (true, Some(echo)) = (route, &model.echo) {
        let extracted = extract_echo(&mut g, &off_pass.trace, &echo.layers.sources, row.t_star)?;
        let z = match fixed {
            Some((z, _)) => {
                let shape = g.shape(extracted).to_vec();
                g.constant(&shape, z.clone())?
            }
            None => extracted,
        };
        echo_value = Some(g.value(z).to_vec());
        let z_bar = normalize_echo(&mut g, z);
        let mask = if echo.config.answer_only_mask { row.mask.clone() } else { vec![true; row.len()] };
        let ctx = InjectionContext { echo: z_bar, mask, route: true };
        let on_pass = model.forward(&mut g, &row.tokens, Some(&ctx), dropout)?;
        for &gate in &on_pass.gates {
            gate_sum += g.value(gate).iter().sum::<f64>();
            gate_count += g.value(gate).len();
        }
        let ce_on = g.masked_cross_entropy(on_pass.logits, &labels)?;
        let on_term = g.scale(ce_on.loss, weight);
        let teacher_var = match fixed {
            Some((_, t)) => {
                let shape = g.shape(on_pass.logits).to_vec();
                g.constant(&shape, t.clone())?
            }
            None => on_pass.logits,
        };
        teacher = Some(g.value(on_pass.logits).to_vec());
        let kd = kd_loss(&mut g, teacher_var, off_pass.logits, &positions, config.tau)?;
        let kd_term = g.scale(kd.loss, weight);
        on_kd = Some((g.scalar(on_term), g.scalar(kd_term)));
        let weighted_kd = g.scale(kd_term, config.lambda_kd);
        let routed = g.add(on_term, weighted_kd)?;
        g.add(off_term, routed)?
    } else {
        // The boundary echo is always extracted in the first pass.
        if let Some(echo) = &model.echo {
            extract_echo(&mut g, &off_pass.trace, &echo.layers.sources, row.t_star)?;
        }
        off_term
    };

    let grads = g.backward(loss)?;
    let mut by_name = HashMap::new();
    for (name, t) in model.trainable_tensors() {
        if let Some(gr) = grads.for_tensor(t) {
            if let Some(bad) = gr.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric { op: "backward", detail: format!("gradient of {name} contains {bad}") });
            }
            by_name.insert(name, gr.to_vec());
        }
    }
    Ok(SampleLoss { off, on_kd, gate_sum, gate_count, teacher, echo: echo_value, grads: by_name })
}

/// AdamW with decoupled weight decay and bias correction folded into the step size:
/// `w ← w − lr·√(1−β₂ᵗ)/(1−β₁ᵗ) · m/(√v + ε) − lr·wd·w`.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    state: HashMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    /// Updates every tensor that carries a gradient; tensors without one are skipped.
    /// A non-finite gradient aborts the whole step before anything changes.
    pub fn step<'t>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'t mut Tensor)>,
        config: &ObjectiveConfig,
    ) -> Result<()> {
        let params: Vec<(String, &mut Tensor)> = params.into_iter().collect();
        for (name, t) in &params {
            if let Some(bad) = t.grad().and_then(|g| g.iter().find(|x| !x.is_finite())) {
                return Err(Error::Numeric {
                    op: "optimizer_step",
                    detail: format!("gradient of {name} contains {bad}"),
                });
            }
        }
        for (name, t) in params {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            let n = grad.len();
            let st = self.state.entry(name).or_insert_with(|| Moments { step: 0, m: vec![0.0; n], v: vec![0.0; n] });
            st.step += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let step_size = config.lr * (1.0 - b2.powi(st.step as i32)).sqrt() / (1.0 - b1.powi(st.step as i32));
            let decay = config.lr * config.weight_decay;
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
                let update = step_size * st.m[i] / (st.v[i].sqrt() + config.eps);
                *w -= update + decay * *w;
            }
        }
        Ok(())
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}

/// Per-step record for the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub step: usize,
    pub p_k: f64,
    pub r_k: bool,
    pub l_off: f64,
    pub l_on: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_total: f64,
    pub grad_norm: f64,
    pub gate_mean: Option<f64>,
}

/// Where each step's route comes from.
#[derive(Debug, Clone)]
pub enum RouteSource {
    Scheduled(Router),
    /// Fixed route every step; the reported probability is 1 or 0.
    Forced(bool),
}

impl RouteSource {
    fn next(&mut self, k: usize) -> Result<(f64, bool)> {
        match self {
            RouteSource::Scheduled(r) => r.sample(k),
            RouteSource::Forced(on) => Ok((if *on { 1.0 } else { 0.0 }, *on)),
        }
    }
}

fn grad_norm(model: &Model) -> f64 {
    model
        .trainable_tensors()
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Full trainer: Echo-off loss every step, Echo-on and distillation when routed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: ObjectiveConfig,
    pub optimizer: AdamW,
    pub routes: RouteSource,
    /// `None` disables adapter dropout.
    pub dropout_seed: Option<u64>,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: ObjectiveConfig, routes: RouteSource, dropout_seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { model, config, optimizer: AdamW::new(), routes, dropout_seed, step: 0 })
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepResult> {
        let k = self.step;
        let (p_k, drawn) = self.routes.next(k)?;
        let route = drawn && self.model.echo.is_some();
        self.model.zero_grad();
        let seed = self.dropout_seed;
        let parts = accumulate_batch_gradients(
            &mut self.model,
            batch,
            route,
            &self.config,
            |i| sample_dropout(seed, k, i),
            Teacher::Live,
        );
        let parts = match parts {
            Ok(p) => p,
            Err(e) => {
                self.model.zero_grad();
                return Err(e);
            }
        };
        if !parts.total.is_finite() {
            self.model.zero_grad();
            return Err(Error::Numeric { op: "train_step", detail: format!("loss {} at step {k}", parts.total) });
        }
        let norm = grad_norm(&self.model);
        self.optimizer.step(self.model.trainable_tensors_mut(), &self.config)?;
        self.step += 1;
        Ok(StepResult {
            step: k,
            p_k,
            r_k: route,
            l_off: parts.off,
            l_on: parts.on,
            l_kd: parts.kd,
            l_total: parts.total,
            grad_norm: norm,
            gate_mean: parts.gate_mean,
        })
    }
}

/// Plain LoRA/DoRA trainer: one pass, supervised loss, AdamW. Kept separate
/// from [`Trainer`] so the two can be compared step for step.
#[derive(Debug, Clone)]
pub struct PlainTrainer {
    pub model: Model,
    pub config: ObjectiveConfig,
    pub optimizer: AdamW,
    pub dropout_seed: Option<u64>,
    pub step: usize,
}

impl PlainTrainer {
    pub fn new(model: Model, config: ObjectiveConfig, dropout_seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        Ok(PlainTrainer { model, config, optimizer: AdamW::new(), dropout_seed, step: 0 })
    }

    /// Returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let k = self.step;
        let n = batch.supervised_count();
        if n == 0 {
            return Err(Error::Data("batch has no supervised positions".into()));
        }
        self.model.zero_grad();
        let mut total = 0.0;
        let mut all = Vec::with_capacity(batch.len());
        for (i, row) in batch.rows.iter().enumerate() {
            let labels = row.shifted_labels();
            let count = labels.iter().filter(|&&y| y != IGNORE_INDEX).count();
            let mut g = Graph::new();
            let out = self.model.forward(&mut g, &row.tokens, None, sample_dropout(self.dropout_seed, k, i))?;
            let ce = g.masked_cross_entropy(out.logits, &labels)?;
            let loss = g.scale(ce.loss, count as f64 / n as f64);
            total += g.scalar(loss);
            let grads = g.backward(loss)?;
            let per: Vec<(String, Vec<f64>)> = self
                .model
                .trainable_tensors()
                .into_iter()
                .filter_map(|(name, t)| grads.for_tensor(t).map(|gr| (name, gr.to_vec())))
                .collect();
            all.push(per);
        }
        for per in all {
            let mut tensors = self.model.trainable_tensors_mut();
            for (name, gr) in per {
                if let Some((_, t)) = tensors.iter_mut().find(|(n, _)| *n == name) {
                    t.accumulate_grad(&gr)?;
                }
            }
        }
        self.optimizer.step(self.model.trainable_tensors_mut(), &self.config)?;
        self.step += 1;
        Ok(total)
    }
}
