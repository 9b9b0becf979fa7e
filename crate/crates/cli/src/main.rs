use std::path::PathBuf;
use std::process::ExitCode;

use causal_kt::pipeline::{PipelineConfig, PipelineError, Stage, Workspace};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "causal-kt", version, about = "Causal effects of on-demand tutoring from learning event logs")]
struct Cli {
    /// TOML config; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for every parallel stage.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the default config as TOML and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Every stage in order.
    Run {
        /// Event log to analyze instead of a simulation.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate a synthetic event log with ground truth.
    Simulate {
        #[arg(long)]
        students: Option<usize>,
    },
    /// Build the analytic samples and the DKT holdout.
    Prep {
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the knowledge-tracing model on the holdout.
    TrainDkt {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract knowledge features for every analytic row.
    Extract,
    /// Fit nuisance and causal forests and the AIPW effects.
    Estimate {
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Heterogeneity, robustness and the report bundle.
    Analyze,
}

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    match &cli.command {
        Some(Command::Run { log: Some(log) } | Command::Prep { log: Some(log) }) => {
            cfg.paths.log = Some(log.clone());
        }
        Some(Command::Simulate { students: Some(n) }) => cfg.simulate.n_students = *n,
        Some(Command::TrainDkt { epochs: Some(n) }) => cfg.dkt.epochs = *n,
        Some(Command::Estimate { trees: Some(n) }) => cfg.estimation.forest.n_trees = *n,
        _ => {}
    }
    cfg.validate()?;
    for path in [&cfg.paths.log, &cfg.paths.sessions, &cfg.paths.context].into_iter().flatten() {
        if !path.exists() {
            return Err(PipelineError::Config(format!("file {} does not exist", path.display())));
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_defaults {
        print!("{}", PipelineConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no command given; see --help");
        return ExitCode::from(2);
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let ws = Workspace::new(cfg.paths.out.clone());
    let result = match command {
        Command::Run { .. } => ws.run_all(&cfg),
        Command::Simulate { .. } => ws.run_stage(Stage::Simulate, &cfg),
        Command::Prep { .. } => ws.run_stage(Stage::Prep, &cfg),
        Command::TrainDkt { .. } => ws.run_stage(Stage::TrainDkt, &cfg),
        Command::Extract => ws.run_stage(Stage::Extract, &cfg),
        Command::Estimate { .. } => ws.run_stage(Stage::Estimate, &cfg),
        Command::Analyze => ws.run_stage(Stage::Analyze, &cfg),
    };
    match result {
        Ok(()) => {
            eprintln!("done: {}", ws.root.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
