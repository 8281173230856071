use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stagdid::csdid::Flavor;
use stagdid::Execution;
use stagdid_cli::ingest::ColumnMap;
use stagdid_cli::pipeline::AggregationSet;
use stagdid_cli::{CliError, CliResult, RunConfig, OUT_DIR_ENV};

#[derive(Parser)]
#[command(
    name = "stagdid",
    version,
    about = "Staggered difference-in-differences analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a panel CSV is balanced and well formed.
    Validate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        columns: ColumnArgs,
    },
    /// Estimate group-time effects, aggregates and sensitivity; write all result files.
    Run(RunArgs),
    /// Write only the sensitivity report.
    Sensitivity(RunArgs),
    /// Generate a synthetic panel and its truth table from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ColumnArgs {
    #[arg(long)]
    unit_col: Option<String>,
    #[arg(long)]
    period_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    cohort_col: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Covariates to add squared, as `<name>_sq`.
    #[arg(long, value_delimiter = ',')]
    square: Option<Vec<String>>,
}

impl ColumnArgs {
    fn apply(
        self,
        columns: &mut ColumnMap,
        covariates: &mut Vec<String>,
        squared: &mut Vec<String>,
    ) {
        let set = |slot: &mut String, v: Option<String>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut columns.unit, self.unit_col);
        set(&mut columns.period, self.period_col);
        set(&mut columns.outcome, self.outcome_col);
        set(&mut columns.cohort, self.cohort_col);
        if let Some(c) = self.covariates {
            *covariates = c;
        }
        if let Some(s) = self.square {
            *squared = s;
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnArgs,
    /// OR, IPW or DR.
    #[arg(long)]
    flavor: Option<Flavor>,
    /// Comma-separated subset of overall,group,event,simple.
    #[arg(long, value_delimiter = ',')]
    aggregations: Option<Vec<AggregationSet>>,
    /// Bootstrap replicates (0 disables).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated smoothness budgets M.
    #[arg(long, value_delimiter = ',')]
    m_grid: Option<Vec<f64>>,
    /// Comma-separated relative-magnitude budgets.
    #[arg(long, value_delimiter = ',')]
    mbar_grid: Option<Vec<f64>>,
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long)]
    serial: bool,
}

impl RunArgs {
    fn into_config(self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.input {
            c.input = v;
        }
        self.columns
            .apply(&mut c.columns, &mut c.covariates, &mut c.squared);
        if let Some(v) = self.flavor {
            c.flavor = v;
        }
        if let Some(v) = self.aggregations {
            c.aggregations = v;
        }
        if let Some(v) = self.bootstrap {
            c.bootstrap = v;
        }
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if let Some(v) = self.m_grid {
            c.m_grid = v;
        }
        if let Some(v) = self.mbar_grid {
            c.mbar_grid = v;
        }
        if self.out.is_some() {
            c.output_dir = self.out;
        }
        if self.serial {
            c.execution = Execution::Serial;
        }
        Ok(c)
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Validate { input, columns } => {
            let (mut map, mut covariates, mut squared) =
                (ColumnMap::default(), Vec::new(), Vec::new());
            columns.apply(&mut map, &mut covariates, &mut squared);
            let summary = stagdid_cli::validate(&input, &map, &covariates, &squared)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).map_err(CliError::from)?
            );
        }
        Command::Run(args) => {
            for path in stagdid_cli::run(&args.into_config()?)? {
                println!("{}", path.display());
            }
        }
        Command::Sensitivity(args) => {
            println!(
                "{}",
                stagdid_cli::sensitivity(&args.into_config()?)?.display()
            );
        }
        Command::Simulate {
            scenario,
            seed,
            out,
        } => {
            for path in stagdid_cli::simulate(&scenario, seed, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_record());
            ExitCode::FAILURE
        }
    }
}
