//! Per-step metrics CSV and the end-of-run JSON summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use echo_lora::data::Task;
use echo_lora::objective::StepResult;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};

/// One CSV row. Echo-on and distillation cells stay empty on unrouted steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub p_k: f64,
    pub r_k: u8,
    #[serde(rename = "L_off")]
    pub l_off: f64,
    #[serde(rename = "L_on")]
    pub l_on: Option<f64>,
    #[serde(rename = "L_kd")]
    pub l_kd: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub grad_norm: f64,
    pub gate_mean: Option<f64>,
}

impl From<&StepResult> for MetricsRow {
    fn from(s: &StepResult) -> Self {
        MetricsRow {
            step: s.step,
            p_k: s.p_k,
            r_k: u8::from(s.r_k),
            l_off: s.l_off,
            l_on: s.l_on,
            l_kd: s.l_kd,
            l_total: s.l_total,
            grad_norm: s.grad_norm,
            gate_mean: s.gate_mean,
        }
    }
}

pub const CSV_COLUMNS: [&str; 9] = ["step", "p_k", "r_k", "L_off", "L_on", "L_kd", "L_total", "grad_norm", "gate_mean"];

/// Streams rows to disk as training runs; the file is created up front so an
/// unwritable directory fails before any step is taken.
pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        writer.write_record(CSV_COLUMNS).map_err(|e| HarnessError::Metrics(e.to_string()))?;
        Ok(MetricsWriter { path: path.to_path_buf(), writer, rows: 0 })
    }

    pub fn push(&mut self, step: &StepResult) -> Result<()> {
        self.writer
            .serialize(MetricsRow::from(step))
            .map_err(|e| HarnessError::Metrics(format!("{}: {e}", self.path.display())))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| HarnessError::Metrics(format!("{}: {e}", path.display())))?;
    let header: Vec<String> =
        reader.headers().map_err(|e| HarnessError::Metrics(e.to_string()))?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(HarnessError::Metrics(format!("unexpected columns {header:?}")));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| HarnessError::Metrics(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub l_off: f64,
    pub l_on: Option<f64>,
    pub l_kd: Option<f64>,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub routed_steps: usize,
    pub final_losses: Option<FinalLosses>,
    /// Exact-match accuracy per task on the held-out set, in [0, 1].
    pub eval_accuracy: BTreeMap<Task, f64>,
    pub mean_accuracy: f64,
    pub trainable_parameters: usize,
    pub wall_time_secs: f64,
    pub config: RunConfig,
}

impl Summary {
    pub fn final_losses(last: Option<&StepResult>) -> Option<FinalLosses> {
        last.map(|s| FinalLosses { l_off: s.l_off, l_on: s.l_on, l_kd: s.l_kd, l_total: s.l_total })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Metrics(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Metrics(format!("{}: {e}", path.display())))
    }
}
