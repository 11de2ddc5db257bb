use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rft_core::data::Task;
use rft_core::experiment::{self, ExperimentConfig, RunPaths};
use rft_core::metrics::EvalReport;

#[derive(Parser)]
#[command(name = "rft", version, about = "Two-stage SFT + GRPO training on planted-shape grids")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON or TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set rft.group_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out splits.
    GenData,
    /// Supervised fine-tuning from a fresh policy.
    TrainSft {
        /// Training split (default: <out>/train.jsonl).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// GRPO fine-tuning from the SFT checkpoint.
    TrainRft {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        /// Checkpoint name inside the output directory.
        #[arg(long, default_value = "rft")]
        checkpoint: String,
        /// Split to evaluate (default: <out>/heldout.jsonl).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// RFT data-efficiency sweep from the SFT checkpoint.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Compare SFT and RFT reports and run the prompt-robustness check.
    Report {
        #[arg(long, default_value = "rft")]
        checkpoint: String,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &g.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolve()?)
}

fn read_report(paths: &RunPaths, name: &str) -> Result<Option<EvalReport>> {
    let path = paths.file(&format!("{name}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    Ok(Some(serde_json::from_str(&text).with_context(|| path.display().to_string())?))
}

fn summary(report: &EvalReport) -> String {
    let mut parts = Vec::new();
    for (task, r) in &report.tasks {
        for (k, v) in &r.metrics {
            parts.push(format!("{task}.{k}={v:.4}"));
        }
    }
    parts.join(" ")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let paths = experiment::prepare_output(&cfg)?;
    let split_or = |given: &Option<PathBuf>, default: PathBuf| given.clone().unwrap_or(default);
    match cli.command {
        Command::GenData => {
            let (train, heldout) = experiment::gen_data_stage(&cfg, &paths)?;
            println!("wrote {} training and {} held-out records", train.len(), heldout.len());
        }
        Command::TrainSft { data } => {
            let train = experiment::load_split(&split_or(&data, paths.train()))?;
            let params = experiment::train_sft_stage(&cfg, &paths, &train)?;
            println!("sft: {} trainable parameters, checkpoint {}", params.num_trainable(), paths.checkpoint("sft").0.display());
        }
        Command::TrainRft { data } => {
            let train = experiment::load_split(&split_or(&data, paths.train()))?;
            let sft = experiment::load_params("sft", &cfg, &paths)?;
            experiment::train_rft_stage(&cfg, &paths, &train, &sft)?;
            println!("rft: checkpoint {}", paths.checkpoint("rft").0.display());
        }
        Command::Eval { checkpoint, data } => {
            let split = experiment::load_split(&split_or(&data, paths.heldout()))?;
            let params = experiment::load_params(&checkpoint, &cfg, &paths)?;
            let report = experiment::evaluate_with(&cfg, &params, &split)?;
            experiment::write_report(&report, &format!("eval_{checkpoint}"), &cfg, &paths)?;
            println!("{checkpoint}: {}", summary(&report));
        }
        Command::Sweep { data, heldout } => {
            let train = experiment::load_split(&split_or(&data, paths.train()))?;
            let heldout = experiment::load_split(&split_or(&heldout, paths.heldout()))?;
            let sft = experiment::load_params("sft", &cfg, &paths)?;
            for row in experiment::sweep_stage(&cfg, &paths, &train, &heldout, &sft)? {
                println!("fraction {}: {}", row.fraction, summary(&row.report));
            }
        }
        Command::Report { checkpoint, heldout } => {
            let heldout = experiment::load_split(&split_or(&heldout, paths.heldout()))?;
            let params = experiment::load_params(&checkpoint, &cfg, &paths)?;
            let robust = experiment::robustness(&cfg, &params, &heldout)?;
            let (sft, rft) = (read_report(&paths, "eval_sft")?, read_report(&paths, "eval_rft")?);
            let mut rows = String::from("task,metric,sft,rft,delta\n");
            if let (Some(s), Some(r)) = (&sft, &rft) {
                for task in Task::ALL {
                    for (name, &b) in s.tasks.get(task.name()).map(|t| &t.metrics).into_iter().flatten() {
                        if let Some(a) = r.metric(task, name) {
                            rows.push_str(&format!("{task},{name},{b},{a},{}\n", a - b));
                        }
                    }
                }
            }
            experiment::write_text(&paths.file("report.csv"), &rows)?;
            let mut prompts = String::from("template,accuracy\n");
            for (t, a) in robust.templates.iter().zip(&robust.accuracies) {
                prompts.push_str(&format!("\"{t}\",{a}\n"));
            }
            experiment::write_text(&paths.file("prompt_robustness.csv"), &prompts)?;
            let out = serde_json::json!({
                "config_hash": cfg.hash(),
                "sft": sft,
                "rft": rft,
                "prompt_robustness": { "templates": robust.templates, "accuracies": robust.accuracies, "max_delta": robust.max_delta },
            });
            experiment::write_text(&paths.file("report.json"), &(serde_json::to_string_pretty(&out)? + "\n"))?;
            print!("{rows}");
            println!("prompt robustness: max pairwise accuracy delta {:.4}", robust.max_delta);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already render their sources; skip repeats
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            eprintln!("error: {}", message.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
