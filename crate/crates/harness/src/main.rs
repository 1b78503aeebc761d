use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use echo_harness::ablation::{render_table, run_ablation, write_table_csv, Variant, VARIANTS};
use echo_harness::checkpoint::Checkpoint;
use echo_harness::config::RunConfig;
use echo_harness::runner::{self, resolve_out_dir, MERGE_TOLERANCE};
use echo_harness::Result;

#[derive(Parser)]
#[command(
    name = "echo-lora",
    version,
    about = "Train and inspect echo-injected LoRA/DoRA adapters on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the init, data, routing and dropout seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `train.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write checkpoint, metrics and summary.
    Train(Common),
    /// Per-task exact-match accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate under this config instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the ablation grid, or one variant of it.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant id, A-0 to A-9.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Re-save a checkpoint, optionally stripped of echo parameters.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
        /// Drop every echo tensor, leaving backbone and adapters.
        #[arg(long)]
        deploy: bool,
    },
    /// Compare merged and adapted outputs; fails when any deviation reaches 1e-9.
    MergeCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Random probe rows per module and probe sequences for the logits.
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_accuracy(acc: &std::collections::BTreeMap<echo_lora::data::Task, f64>) {
    for (task, a) in acc {
        println!("{:<18} {:>6.1}", task.to_string(), a * 100.0);
    }
    println!("{:<18} {:>6.1}", "mean", runner::mean(acc.values().map(|a| a * 100.0)));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let out = resolve_out_dir(&cfg, common.out.as_deref());
            let outcome = runner::train(&cfg, Some(&out))?;
            println!(
                "trained {} steps ({} routed) in {:.1}s, outputs in {}",
                outcome.summary.steps,
                outcome.summary.routed_steps,
                outcome.summary.wall_time_secs,
                out.display()
            );
            print_accuracy(&outcome.summary.eval_accuracy);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            print_accuracy(&runner::evaluate_checkpoint(&checkpoint, cfg.as_ref())?);
        }
        Command::Ablate { common, variant } => {
            let cfg = common.load()?;
            let variants: Vec<&Variant> = match &variant {
                Some(id) => vec![Variant::by_id(id)?],
                None => VARIANTS.iter().collect(),
            };
            let out = resolve_out_dir(&cfg, common.out.as_deref());
            std::fs::create_dir_all(&out)
                .map_err(|source| echo_harness::HarnessError::Io { path: out.clone(), source })?;
            let rows = run_ablation(&cfg, &variants, Some(&out))?;
            let table = out.join("ablation.csv");
            write_table_csv(&rows, &table)?;
            print!("{}", render_table(&rows));
            println!("table written to {}", table.display());
        }
        Command::Export { checkpoint, out, deploy } => {
            let ckpt = runner::export(&checkpoint, &out, deploy)?;
            println!("wrote {} tensors to {}", ckpt.tensors.len(), out.display());
        }
        Command::MergeCheck { checkpoint, probes, seed } => {
            let model = Checkpoint::load(Path::new(&checkpoint))?.to_model()?;
            let report = runner::merge_check(&model, probes, seed)?;
            for (module, dev) in &report.modules {
                println!("{module:<8} {dev:.3e}");
            }
            println!("{:<8} {:.3e}", "logits", report.logits);
            report.check()?;
            println!("max deviation {:.3e} < {MERGE_TOLERANCE:e}", report.max_deviation());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
