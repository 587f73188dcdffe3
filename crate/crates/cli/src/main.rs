use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use relapse_core::config::{ConfigError, ExperimentConfig};
use relapse_core::pipeline::{ablation_text, AblationAxis, Experiment, PipelineError, PipelineKind};

#[derive(Parser, Debug)]
#[command(
    name = "relapse",
    version,
    about = "Uncertainty-driven relapse detection from smartwatch data"
)]
struct Cli {
    /// Experiment config (JSON). Defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the config's output_dir.
    #[arg(long, global = true, env = "RELAPSE_OUT")]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pipeline {
    Forecast,
    Multitask,
}

impl From<Pipeline> for PipelineKind {
    fn from(p: Pipeline) -> Self {
        match p {
            Pipeline::Forecast => Self::Forecast,
            Pipeline::Multitask => Self::Multitask,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Posenc,
    Stride,
    Window,
    Tau,
    Alpha,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Posenc => Self::Posenc,
            Axis::Stride => Self::Stride,
            Axis::Window => Self::Window,
            Axis::Tau => Self::Tau,
            Axis::Alpha => Self::Alpha,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate the synthetic cohort.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate raw samples into five-minute tables.
    ImportRaw {
        /// `patient_id,timestamp_ms,channel,value` rows.
        #[arg(long)]
        raw: PathBuf,
        /// `patient_id,date_index,sleep_onset_min,wake_min,label,split` rows.
        #[arg(long)]
        days: PathBuf,
    },
    /// Train one pipeline for every seed and patient.
    Train {
        #[arg(long, value_enum)]
        pipeline: Pipeline,
    },
    /// Score all days; both pipelines when none is given.
    Score {
        #[arg(long, value_enum)]
        pipeline: Option<Pipeline>,
    },
    /// Select fusion settings on validation and write fused scores.
    Fuse,
    /// Test-split metrics.
    Eval,
    /// Sweep one axis and print its table.
    Ablate {
        #[arg(value_enum)]
        axis: Axis,
    },
    /// Aggregate and per-patient tables from the metrics.
    Report,
    /// Every stage from data to report.
    Run {
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &cli.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let exp = Experiment::new(cfg.clone(), cfg.output_dir.clone())?;
    match cli.command {
        Command::Config => unreachable!(),
        Command::Synth { seed } => {
            let days = exp.synth(seed)?;
            println!("wrote {} days to {}", days.len(), exp.root.join("data").display());
        }
        Command::ImportRaw { raw, days } => {
            let days = exp.import_raw(&raw, &days)?;
            println!("imported {} days", days.len());
        }
        Command::Train { pipeline } => {
            exp.train(pipeline.into())?;
            println!("trained {} for seeds {:?}", PipelineKind::from(pipeline), cfg.seeds);
        }
        Command::Score { pipeline } => {
            let kinds = pipeline.map_or(PipelineKind::ALL.to_vec(), |p| vec![p.into()]);
            for k in kinds {
                exp.score(k)?;
                println!("scored {k}");
            }
        }
        Command::Fuse => {
            exp.fuse()?;
            println!("fused scores in {}", exp.root.join("fused").display());
        }
        Command::Eval => {
            let report = exp.eval()?;
            for (d, s) in &report.summary {
                if let Some(avg) = s.aggregate.avg {
                    println!("{d:<16} AVG {:.3} ± {:.3}", avg.mean, avg.std);
                }
            }
        }
        Command::Ablate { axis } => {
            let rows = exp.ablate(axis.into())?;
            print!("{}", ablation_text(&rows));
        }
        Command::Report => print!("{}", exp.report()?),
        Command::Run { synth_seed } => {
            exp.run_all(synth_seed)?;
            print!("{}", exp.report()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
