use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowis::experiment::{
    load_run, render_table, run_experiment, train_flow, write_scatter, write_training_curve, ExperimentConfig,
    FlowSpec, CHECKPOINT_FILE, CURVE_FILE,
};
use flowis::flow::{split_dataset, Checkpoint, Trainer};
use flowis::Error;

const DATASET_FILE: &str = "dataset.csv";

#[derive(Parser)]
#[command(name = "flowis", version, about = "Rare-event importance sampling in the latent space of a normalizing flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset into <out>/dataset.csv.
    Simulate(Common),
    /// Train the configured flow; writes <out>/flow.json and <out>/training_curve.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue training from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the full method matrix and write per-trial and aggregate reports.
    Run(Common),
    /// Print the aggregate table of a run and write scatter CSVs.
    Report {
        /// Run directory produced by `flowis run`.
        run_dir: PathBuf,
        /// Trial whose samples go into the scatter CSVs.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Scatter output directory (default: <run_dir>/scatter).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let mut cfg = ExperimentConfig::load(&c.config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create output directory {}: {e}", dir.display())))
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    prepare_out(&cfg.output_dir)?;
    let seed = flowis::experiment::dataset_seed(cfg.seed);
    let data = cfg.dataset.build(seed)?;
    let path = cfg.output_dir.join(DATASET_FILE);
    data.save(&path)?;
    println!("wrote {} rows to {} (seed {seed})", data.len(), path.display());
    Ok(())
}

fn train(c: &Common, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let FlowSpec::Train(tc) = &cfg.flow else {
        return Err(Failure::Usage("config `flow` must be a `train` spec for this command".into()));
    };
    prepare_out(&cfg.output_dir)?;
    let data = cfg.dataset.build(flowis::experiment::dataset_seed(cfg.seed))?;
    let (model, report, state) = match resume {
        None => train_flow(&data.outcomes, tc)?,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let Some((_, state)) = ckpt.training else {
                return Err(Failure::Usage(format!("{} carries no training state", path.display())));
            };
            let split = split_dataset(&data.outcomes, tc)?;
            let mut trainer = Trainer::resume(tc.clone(), ckpt.model, state)?;
            while trainer.state().epochs_done < tc.epochs {
                let s = trainer.run_epoch(&split)?;
                log::info!("epoch {} train nll {:.5} val nll {:.5}", s.epoch, s.train_nll, s.val_nll);
            }
            trainer.into_parts()
        }
    };
    let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);
    Checkpoint {
        model,
        training: Some((tc.clone(), state)),
    }
    .save(&ckpt_path)?;
    write_training_curve(&cfg.output_dir.join(CURVE_FILE), &report)?;
    println!(
        "trained {} epochs, best val NLL {} at epoch {}; wrote {}",
        report.curve.len(),
        report.best_val_nll,
        report.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn run(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    prepare_out(&cfg.output_dir)?;
    let summary = run_experiment(&cfg)?;
    let view = load_run(&cfg.output_dir)?;
    print!("{}", render_table(&view));
    match summary.failed_trials() {
        0 => Ok(()),
        n => Err(Failure::Partial(n)),
    }
}

fn report(run_dir: &Path, trial: usize, out: Option<&Path>) -> Result<(), Failure> {
    let view = load_run(run_dir)?;
    print!("{}", render_table(&view));
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("scatter"));
    let files = write_scatter(&view, trial, &out)?;
    println!("wrote {} scatter files to {}", files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Train { common, resume } => train(common, resume.as_deref()),
        Command::Run(c) => run(c),
        Command::Report { run_dir, trial, out } => report(run_dir, *trial, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Partial(n)) => {
            eprintln!("error: {n} trial(s) failed; see the trials/ directory");
            ExitCode::from(3)
        }
    }
}
