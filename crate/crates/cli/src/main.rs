use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cglearn_core::eval::Method;
use cglearn_core::experiment::{run_with_jobs, ExperimentConfig, Scenario};
use cglearn_core::Error;

/// Gradient-consistency masked training: synthetic and real-data experiments.
#[derive(Debug, Parser)]
#[command(name = "cglearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write summary.csv, trials.jsonl and summary.txt.
    Run(RunArgs),
    /// Print the effective configuration as TOML without running anything.
    Config(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// linear-multi, linear-single, real-regression, real-classification,
    /// two-feature-demo or gradcheck.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of erm, cglearn, irmv1.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Fixed consistency threshold instead of validation selection.
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated batch counts for linear-single.
    #[arg(long, value_delimiter = ',')]
    batches: Option<Vec<usize>>,
    /// Comma-separated SEM case codes such as FEU,PES.
    #[arg(long, value_delimiter = ',')]
    cases: Option<Vec<String>>,
    /// boston, yacht, wine-red or wine-white.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset CSV files.
    #[arg(long, env = "CGLEARN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the generated environments of trial 0 as CSV files here.
    #[arg(long)]
    export_envs: Option<PathBuf>,
    /// Worker threads (default: all available cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Do not print the summary table.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn config(&self) -> cglearn_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = Some(t);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.methods {
            cfg.methods = Some(m.clone());
        }
        if let Some(t) = self.threshold {
            cfg.threshold = Some(t);
        }
        if let Some(b) = &self.batches {
            cfg.batches = b.clone();
        }
        if let Some(c) = &self.cases {
            cfg.cases = c.clone();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
            cfg.dataset_spec = None;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(e) = &self.export_envs {
            cfg.export_envs = Some(e.clone());
        }
        Ok(cfg)
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("cglearn: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Config(args) => match args.config().and_then(|c| {
            c.validate()?;
            c.to_toml_string()
        }) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run(args) => {
            let cfg = match args.config() {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let out = match run_with_jobs(&cfg, args.jobs) {
                Ok(o) => o,
                Err(e) => return fail(&e),
            };
            if let Err(e) = out.write(&cfg.output) {
                return fail(&e);
            }
            if !args.quiet {
                for note in &out.notes {
                    println!("{note}");
                }
                print!("{}", out.table());
                println!("results written to {}", cfg.output.display());
            }
            if out.checks_passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("cglearn: gradient check failed");
                ExitCode::from(5)
            }
        }
    }
}
