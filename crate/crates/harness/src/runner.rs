//! Training, evaluation, export and merge checks for one configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use echo_lora::adapters::Dropout;
use echo_lora::autodiff::{Graph, Tensor};
use echo_lora::data::{epoch_batches, eval_by_task, gen_mixture, steps_per_epoch, Batch, Sample, Task};
use echo_lora::model::Model;
use echo_lora::objective::{RouteSource, StepResult, Trainer};
use echo_lora::rng::{derive, normal_vec, stream, Stream};
use echo_lora::routing::{Router, RoutingSchedule};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{MetricsWriter, Summary};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Salt separating the held-out set from the training set drawn with the same data seed.
const EVAL_SALT: u64 = 0xE7A1;

/// Tolerance for merged versus adapted outputs.
pub const MERGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

pub fn datasets(cfg: &RunConfig) -> Result<Datasets> {
    let v = cfg.backbone.vocab_size;
    let data = &cfg.data;
    Ok(Datasets {
        train: gen_mixture(&data.tasks, data.train_per_task, data, v, cfg.seeds.data)?,
        eval: gen_mixture(&data.tasks, data.eval_per_task, data, v, derive(cfg.seeds.data, &[EVAL_SALT]))?,
    })
}

pub fn total_steps(cfg: &RunConfig, n_train: usize) -> usize {
    steps_per_epoch(n_train, cfg.train.batch_size) * cfg.train.epochs
}

/// Fresh trainer for `cfg`: routing follows the schedule when echo is enabled
/// and is forced off otherwise.
pub fn build_trainer(cfg: &RunConfig, n_train: usize) -> Result<Trainer> {
    let model = Model::init(&cfg.model_config(), cfg.seeds.init)?;
    let routes = if cfg.echo.enabled {
        let schedule = RoutingSchedule::from_config(&cfg.routing, total_steps(cfg, n_train), cfg.seeds.routing)?;
        RouteSource::Scheduled(Router::new(schedule))
    } else {
        RouteSource::Forced(false)
    };
    Ok(Trainer::new(model, cfg.objective.clone(), routes, Some(cfg.seeds.dropout))?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub steps: Vec<StepResult>,
    pub summary: Summary,
}

/// Trains from a fresh init. With `out_dir`, writes the config, the metrics
/// CSV, a checkpoint after every epoch and the JSON summary.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let started = Instant::now();
    let data = datasets(cfg)?;
    let mut trainer = build_trainer(cfg, data.train.len())?;
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let cfg_path = dir.join(CONFIG_FILE);
            fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
            Some(MetricsWriter::create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let (v, max_len) = (cfg.backbone.vocab_size, cfg.backbone.max_seq_len);
    let mut steps = Vec::with_capacity(total_steps(cfg, data.train.len()));
    for epoch in 0..cfg.train.epochs {
        for chunk in epoch_batches(&data.train, cfg.train.batch_size, cfg.seeds.data, epoch) {
            let batch = Batch::new(&chunk, v, max_len)?;
            let step = trainer.train_step(&batch)?;
            if let Some(m) = metrics.as_mut() {
                m.push(&step)?;
            }
            steps.push(step);
        }
        let last = steps.last().map_or(f64::NAN, |s| s.l_off);
        log::info!("epoch {} done: {} steps, L_off {last:.4}", epoch + 1, steps.len());
        if let Some(dir) = out_dir {
            Checkpoint::from_model(&trainer.model, cfg).save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    if let Some(m) = metrics {
        m.finish()?;
    }
    let eval_accuracy = evaluate(&trainer.model, &data.eval)?;
    let summary = Summary {
        steps: steps.len(),
        routed_steps: steps.iter().filter(|s| s.r_k).count(),
        final_losses: Summary::final_losses(steps.last()),
        mean_accuracy: mean(eval_accuracy.values().copied()),
        eval_accuracy,
        trainable_parameters: trainer.model.trainable_parameter_count(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    if let Some(dir) = out_dir {
        summary.save(&dir.join(SUMMARY_FILE))?;
    }
    Ok(RunOutcome { model: trainer.model, steps, summary })
}

/// Exact-match accuracy per task with the echo path off.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<BTreeMap<Task, f64>> {
    Ok(eval_by_task(model, samples)?.into_iter().collect())
}

/// Evaluates a checkpoint on the held-out set implied by its own config.
pub fn evaluate_checkpoint(path: &Path, config: Option<&RunConfig>) -> Result<BTreeMap<Task, f64>> {
    let ckpt = Checkpoint::load(path)?;
    let stored = ckpt.config()?;
    let cfg = match config {
        Some(c) => {
            ckpt.warn_on_config_mismatch(c);
            c
        }
        None => &stored,
    };
    let model = ckpt.to_model()?;
    evaluate(&model, &datasets(cfg)?.eval)
}

/// Re-saves `input` at `output`, dropping echo tensors when `deploy` is set.
pub fn export(input: &Path, output: &Path, deploy: bool) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(input)?;
    let out = if deploy { ckpt.strip_echo()? } else { ckpt };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    out.save(output)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeReport {
    /// Max absolute deviation per adapted module, named `layer.proj`.
    pub modules: Vec<(String, f64)>,
    /// Max absolute logit deviation of the merged model over the probe sequences.
    pub logits: f64,
}

impl MergeReport {
    pub fn max_deviation(&self) -> f64 {
        self.modules.iter().map(|(_, d)| *d).fold(self.logits, f64::max)
    }

    /// Fails with the worst offender when any deviation reaches the tolerance.
    pub fn check(&self) -> Result<()> {
        let worst =
            self.modules.iter().cloned().chain(std::iter::once(("logits".to_string(), self.logits))).fold(
                (String::new(), 0.0f64),
                |acc, (n, d)| if !acc.1.is_nan() && !(d <= acc.1) { (n, d) } else { acc },
            );
        if worst.1 < MERGE_TOLERANCE {
            Ok(())
        } else {
            Err(HarnessError::MergeCheck { module: worst.0, max_deviation: worst.1 })
        }
    }
}

/// Compares every adapter against its merged weight on random input rows and
/// the whole merged model against the adapted one on random token sequences.
pub fn merge_check(model: &Model, probes: usize, seed: u64) -> Result<MergeReport> {
    let merged = model.merged()?;
    let cfg = model.config();
    let mut rng = stream(seed, Stream::Probe);
    let mut modules = Vec::new();
    for (layer, proj) in model.adapters.keys() {
        let w = model.backbone.projection(layer, proj);
        let w_merged = merged.backbone.projection(layer, proj);
        let u = Tensor::new(&[probes, w.shape()[1]], normal_vec(&mut rng, probes * w.shape()[1], 1.0))?;
        let mut g = Graph::new();
        let uv = g.tensor(&u);
        let adapted = model.adapters.project(&mut g, layer, proj, w, uv, Dropout::Off)?;
        let wm = g.tensor(w_merged);
        let folded = g.matmul_bt(uv, wm)?;
        modules.push((format!("{layer}.{proj}"), max_abs_diff(g.value(adapted), g.value(folded))));
    }
    let plain = model.strip_echo();
    let mut logits = 0.0f64;
    for _ in 0..probes {
        let len = rng.random_range(2..=cfg.max_seq_len.min(16));
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let a = echo_lora::data::NextTokenPredictor::logits(&plain, &tokens)?;
        let b = echo_lora::data::NextTokenPredictor::logits(&merged, &tokens)?;
        logits = logits.max(max_abs_diff(&a, &b));
    }
    Ok(MergeReport { modules, logits })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared outputs differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |m: f64, d| if m.is_nan() || d.is_nan() { f64::NAN } else { m.max(d) })
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Output directory: the `--out` flag wins over the config's own.
pub fn resolve_out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| cfg.train.out_dir.clone(), Path::to_path_buf)
}
