use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unissda::cli::{self, ExperimentConfig, Overrides, OUTPUT_DIR_ENV};
use unissda::datagen::Setting;
use unissda::train::Method;
use unissda::Error;

#[derive(Parser)]
#[command(name = "unissda", version, about = "Universal semi-supervised domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets and a manifest with their digests.
    Generate(GridArgs),
    /// Train and evaluate every method x seed, then aggregate.
    Run {
        #[command(flatten)]
        grid: GridArgs,
        /// Print the resolved grid without running or writing anything.
        #[arg(long)]
        dry_run: bool,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write per-iteration diagnostics for every history under a run directory.
    Diagnose { run_dir: PathBuf },
    /// Re-aggregate an existing output directory from its report files.
    Aggregate { out_dir: PathBuf },
    /// Print the default experiment config as JSON.
    PrintConfig,
}

#[derive(Args)]
struct GridArgs {
    /// JSON experiment config; defaults to the built-in benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated methods: s_plus_t, naive_pseudo_label, pgpr.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// closed, closed_label_shift, open, partial or open_partial.
    #[arg(long)]
    setting: Option<String>,
    /// Output directory; wins over the config file and UNISSDA_OUTPUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GridArgs {
    fn resolve(self) -> unissda::Result<ExperimentConfig> {
        let methods = self
            .methods
            .map(|ms| ms.iter().map(|m| m.parse::<Method>()).collect::<unissda::Result<Vec<_>>>())
            .transpose()?;
        let setting = self.setting.map(|s| s.parse::<Setting>()).transpose()?;
        let env_out = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
        let overrides = Overrides {
            seeds: self.seeds,
            methods,
            setting,
            out: self.out,
        };
        ExperimentConfig::resolve(self.config.as_deref(), overrides, env_out)
    }
}

fn execute(cli: Cli) -> unissda::Result<()> {
    match cli.command {
        Command::Generate(grid) => {
            let cfg = grid.resolve()?;
            let manifest = cli::cmd_generate(&cfg)?;
            println!(
                "wrote {} dataset pairs and manifest.json to {}",
                manifest.datasets.len(),
                cfg.output_dir.display()
            );
        }
        Command::Run { grid, dry_run, jobs } => {
            let cfg = grid.resolve()?;
            if dry_run {
                print!("{}", cli::describe_grid(&cfg));
                return Ok(());
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let out = cli::cmd_run(&cfg, jobs)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} runs, results in {}", out.index.len(), cfg.output_dir.display());
            if out.index.iter().any(|e| e.status != cli::RunStatus::Ok) {
                return Err(Error::Numerical {
                    iteration: 0,
                    detail: "one or more runs aborted, see runs.jsonl".into(),
                });
            }
        }
        Command::Diagnose { run_dir } => {
            for p in cli::cmd_diagnose(&run_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Aggregate { out_dir } => {
            for w in cli::reaggregate(&out_dir)? {
                eprintln!("warning: {w}");
            }
        }
        Command::PrintConfig => {
            let text = serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config serializes");
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
