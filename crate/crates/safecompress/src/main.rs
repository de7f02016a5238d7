//! Command-line shell: config-driven compression runs, the pruning
//! baseline, post-hoc attack evaluation of checkpoints, and report
//! regeneration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safecompress::attack::{make_split, mia_accuracy, train_attacker, AttackKind};
use safecompress::checkpoint::{load_checkpoint, save_checkpoint};
use safecompress::config::{load_config, ExperimentSpec};
use safecompress::error::{Error, Result};
use safecompress::model::TargetModel;
use safecompress::orchestrate::{
    run_baseline_prune_finetune, run_safecompress, split_seed, Mode, RunTrace,
};
use safecompress::report::{emit_report, load_trace, save_trace, TRACE_JSON};

#[derive(Parser)]
#[command(
    name = "safecompress",
    about = "Compress a classifier to a sparsity budget while defending against membership inference",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the attacker-in-the-loop sparse compression pipeline
    Compress(RunArgs),
    /// Run the pretrain -> magnitude-prune -> fine-tune baseline
    Baseline(RunArgs),
    /// Train fresh attackers against an existing checkpoint and report attack accuracy
    AttackEval(AttackEvalArgs),
    /// Regenerate rounds.csv and summary.json from a saved trace
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target sparsity in (0, 1]
    #[arg(long)]
    omega: Option<f64>,
    /// Attack mode: bmia, wmia, or mmia
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Number of compression rounds
    #[arg(long)]
    rounds: Option<usize>,
    /// Training iterations per round
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable adversarial training of the target
    #[arg(long)]
    adversarial: bool,
    /// Output directory for checkpoint, trace, and reports
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AttackEvalArgs {
    /// Checkpoint to attack
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config describing the dataset and attacker settings (must match
    /// the run that produced the checkpoint for meaningful membership)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Saved trace.json from a previous run
    #[arg(long)]
    trace: PathBuf,
    /// Directory to write rounds.csv and summary.json into
    #[arg(long)]
    output: PathBuf,
}

impl RunArgs {
    fn resolve_spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => load_config(path)?,
            None => {
                let omega = self.omega.ok_or_else(|| Error::Config {
                    path: "omega".to_string(),
                    message: "required: pass --omega or a --config file".to_string(),
                })?;
                ExperimentSpec::with_omega(omega)
            }
        };
        if let Some(omega) = self.omega {
            spec.run.omega = omega;
        }
        if let Some(mode) = self.mode {
            spec.run.mode = mode;
        }
        if let Some(lambda) = self.lambda {
            spec.run.lambda = lambda;
        }
        if let Some(alpha) = self.alpha {
            spec.run.alpha = alpha;
        }
        if let Some(beta) = self.beta {
            spec.run.beta = beta;
        }
        if let Some(rounds) = self.rounds {
            spec.run.total_rounds = rounds;
        }
        if let Some(iterations) = self.iterations {
            spec.run.iterations_per_round = iterations;
        }
        if let Some(seed) = self.seed {
            spec.run.seed = seed;
        }
        if self.adversarial {
            spec.run.adversarial_training = true;
        }
        if let Some(output) = &self.output {
            spec.output_dir = output.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn persist_run(spec: &ExperimentSpec, model: &TargetModel, trace: &RunTrace) -> Result<()> {
    std::fs::create_dir_all(&spec.output_dir)?;
    let checkpoint_path = spec.output_dir.join("model.safc");
    save_checkpoint(model, Some(trace), &checkpoint_path)?;
    println!("wrote {}", checkpoint_path.display());
    let trace_path = spec.output_dir.join(TRACE_JSON);
    save_trace(trace, &trace_path)?;
    println!("wrote {}", trace_path.display());
    if spec.report.csv || spec.report.summary {
        for path in emit_report(trace, &spec.output_dir)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn print_final(trace: &RunTrace) {
    let report = &trace.final_report;
    println!(
        "mode {} | rounds {} | sparsity {:.4} | task acc {:.2}%",
        trace.mode,
        trace.rounds.len(),
        report.sparsity,
        report.task_acc_pct
    );
    if let Some(mia) = report.mia_acc_b_pct {
        println!(
            "black-box MIA acc {:.2}% (TM {:.4})",
            mia,
            report.tm_b.unwrap_or(f64::NAN)
        );
    }
    if let Some(mia) = report.mia_acc_w_pct {
        println!(
            "white-box MIA acc {:.2}% (TM {:.4})",
            mia,
            report.tm_w.unwrap_or(f64::NAN)
        );
    }
    println!("combined TM-score {:.4}", report.tm_combined);
}

fn cmd_compress(args: &RunArgs) -> Result<()> {
    let spec = args.resolve_spec()?;
    let (train, test) = spec.resolve_dataset()?;
    let (model, trace) = run_safecompress(&spec.run, &train, &test)?;
    print_final(&trace);
    persist_run(&spec, &model, &trace)
}

fn cmd_baseline(args: &RunArgs) -> Result<()> {
    let spec = args.resolve_spec()?;
    let (train, test) = spec.resolve_dataset()?;
    let (model, trace) = run_baseline_prune_finetune(&spec.run, &train, &test)?;
    print_final(&trace);
    persist_run(&spec, &model, &trace)
}

fn cmd_attack_eval(args: &AttackEvalArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentSpec::with_omega(0.1),
    };
    if let Some(mode) = args.mode {
        spec.run.mode = mode;
    }
    if let Some(seed) = args.seed {
        spec.run.seed = seed;
    }
    let loaded = load_checkpoint(&args.checkpoint)?;
    println!(
        "checkpoint: dims {:?}, sparsity {:.4}, {} training iterations, {} rounds",
        loaded.model.layer_dims(),
        loaded.model.active_fraction(),
        loaded.model.iterations_done(),
        loaded.rounds_done
    );
    let (train, test) = spec.resolve_dataset()?;
    if train.n_features() != loaded.model.n_features()
        || train.class_count() != loaded.model.class_count()
    {
        return Err(Error::Config {
            path: "dataset".to_string(),
            message: format!(
                "dataset is {}-feature/{}-class but the checkpoint expects {}/{}",
                train.n_features(),
                train.class_count(),
                loaded.model.n_features(),
                loaded.model.class_count()
            ),
        });
    }
    let seed = spec.run.seed;
    let split = make_split(&train, &test, split_seed(seed))?;
    let task = loaded.model.task_accuracy(&test)? * 100.0;
    println!("task acc {task:.2}%");
    if spec.run.mode.uses_black_box() {
        let attacker = train_attacker(
            AttackKind::BlackBox,
            &loaded.model,
            &split,
            &spec.run.attacker,
            seed_tagged(seed, "attack_eval_b"),
        )?;
        let acc = mia_accuracy(
            &attacker,
            &loaded.model,
            &split,
            seed_tagged(seed, "eval_b"),
        )?;
        println!("black-box MIA acc {:.2}%", acc * 100.0);
    }
    if spec.run.mode.uses_white_box() {
        let attacker = train_attacker(
            AttackKind::WhiteBox,
            &loaded.model,
            &split,
            &spec.run.attacker,
            seed_tagged(seed, "attack_eval_w"),
        )?;
        let acc = mia_accuracy(
            &attacker,
            &loaded.model,
            &split,
            seed_tagged(seed, "eval_w"),
        )?;
        println!("white-box MIA acc {:.2}%", acc * 100.0);
    }
    Ok(())
}

fn seed_tagged(master: u64, tag: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ master.wrapping_mul(0x9e3779b97f4a7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    for path in emit_report(&trace, &args.output)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Compress(args) => cmd_compress(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::AttackEval(args) => cmd_attack_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
