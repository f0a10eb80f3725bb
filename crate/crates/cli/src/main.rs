use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use doll::commands::{exit_code, report, Outcome, Workspace};
use doll::config::RunConfig;

#[derive(Parser)]
#[command(name = "doll", version, about = "Localization labels from classifier explanations, and segmentation pre-training on them")]
struct Cli {
    /// Key-value config file (`section.key = value` per line).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set pipeline.tau=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output root; each run writes into `<run-dir>/<run_id>/`.
    #[arg(long, env = "DOLL_RUN_DIR", default_value = "runs", global = true)]
    run_dir: PathBuf,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Rerun stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,

    /// More log output (repeat for debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the weakly labeled corpus and the downstream corpus.
    GenData(Downstream),
    /// Train the classifier ensemble and write its validation AUC table.
    TrainClassifiers,
    /// Compute boosting weights on the validation split.
    BoostWeights,
    /// Write DOLL1 mask files for the train and val splits.
    GenDoll(Aggregation),
    /// Pre-train the segmentation model on the generated masks.
    Pretrain(Aggregation),
    /// Fine-tune on the downstream task.
    Finetune(Finetune),
    /// Evaluate a checkpoint on the downstream test split.
    Eval {
        #[command(flatten)]
        finetune: Finetune,
        /// Defaults to the checkpoint of the matching `finetune` run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare evaluation reports of one or more runs.
    Report {
        /// Run ids under the run directory; defaults to the configured one.
        run_ids: Vec<String>,
        /// Output directory (defaults to `<run-dir>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage for the configured downstream arm, then evaluation.
    Run(Finetune),
    /// Print the resolved configuration and its digest.
    ShowConfig,
}

#[derive(Args, Default)]
struct Aggregation {
    /// boosted or averaged.
    #[arg(long)]
    aggregation: Option<String>,
}

#[derive(Args, Default)]
struct Downstream {
    /// Labeled downstream training images.
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Args, Default)]
struct Finetune {
    #[command(flatten)]
    aggregation: Aggregation,
    #[command(flatten)]
    downstream: Downstream,
    /// doll, scratch or classifier-backbone.
    #[arg(long)]
    init: Option<String>,
    /// on or off.
    #[arg(long, value_name = "on|off")]
    freeze_backbone: Option<String>,
    /// lung, infection or multi.
    #[arg(long)]
    task: Option<String>,
}

impl Aggregation {
    fn overrides(&self, out: &mut Vec<(String, String)>) {
        if let Some(a) = &self.aggregation {
            out.push(("pipeline.aggregation".into(), a.clone()));
        }
    }
}

impl Downstream {
    fn overrides(&self, out: &mut Vec<(String, String)>) {
        if let Some(n) = self.shots {
            out.push(("downstream.shots".into(), n.to_string()));
        }
    }
}

impl Finetune {
    fn overrides(&self, out: &mut Vec<(String, String)>) {
        self.aggregation.overrides(out);
        self.downstream.overrides(out);
        let flags = [
            ("downstream.init", &self.init),
            ("finetune.freeze_backbone", &self.freeze_backbone),
            ("downstream.task", &self.task),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                out.push((key.into(), v.clone()));
            }
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for item in &cli.overrides {
        let Some((k, v)) = item.split_once('=') else {
            return Err(doll::Error::config(item.as_str(), "expected KEY=VALUE").into());
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    match &cli.command {
        Command::GenData(d) => d.overrides(&mut overrides),
        Command::GenDoll(a) | Command::Pretrain(a) => a.overrides(&mut overrides),
        Command::Finetune(f) | Command::Run(f) | Command::Eval { finetune: f, .. } => f.overrides(&mut overrides),
        _ => {}
    }
    Ok(RunConfig::from_text(&text, &overrides)?)
}

fn note(stage: &str, outcome: Outcome) {
    match outcome {
        Outcome::Ran => println!("{stage}: done"),
        Outcome::UpToDate => println!("{stage}: up to date (use --force to rerun)"),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!(doll::Error::config("--jobs", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let config = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_text()?);
        println!("# digest {}", config.digest()?);
        return Ok(());
    }
    if let Command::Report { run_ids, out } = &cli.command {
        let ids = if run_ids.is_empty() { vec![config.run_id.clone()] } else { run_ids.clone() };
        let out = out.clone().unwrap_or_else(|| cli.run_dir.join("report"));
        let cmp = report(&cli.run_dir, &ids, &out)?;
        print!("{}", cmp.text);
        println!("wrote {}", out.display());
        return Ok(());
    }
    let ws = Workspace::open(&cli.run_dir, config, cli.force)?;
    match &cli.command {
        Command::GenData(_) => note("gen-data", ws.gen_data()?),
        Command::TrainClassifiers => note("train-classifiers", ws.train_classifiers()?),
        Command::BoostWeights => note("boost-weights", ws.boost_weights()?),
        Command::GenDoll(_) => note("gen-doll", ws.gen_doll()?),
        Command::Pretrain(_) => note("pretrain", ws.pretrain()?),
        Command::Finetune(_) => note("finetune", ws.finetune()?),
        Command::Eval { checkpoint, .. } => print_eval(&ws, checkpoint.as_deref())?,
        Command::Run(_) => {
            ws.run_all()?;
            print_eval(&ws, None)?;
        }
        Command::Report { .. } | Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn print_eval(ws: &Workspace, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let (path, report) = ws.eval(checkpoint)?;
    for (name, m) in &report.per_class {
        println!("{name:<16} iou {:.4}  acc {:.4}  dice {:.4}", m.iou, m.acc, m.dice);
    }
    println!(
        "{:<16} miou {:.4}  macc {:.4}  mdice {:.4}",
        "mean", report.aggregates.miou, report.aggregates.macc, report.aggregates.mdice
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<doll::Error>().map_or(1, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
