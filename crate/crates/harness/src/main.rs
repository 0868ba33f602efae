use std::path::PathBuf;
use std::process::ExitCode;

use ara_budget::synthgen::{generate_draw, write_csv};
use ara_budget::{Error, ObjectiveContext64, Preset, Result};
use ara_harness::config::{Source, SynthSource};
use ara_harness::experiment::load_data;
use ara_harness::{emit_outputs, exit_code, generalization_check, run_experiment, ExperimentConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ara", version, about = "Contribution-budget optimization experiments")]
struct Cli {
    /// Print the effective configuration (defaults, or --config merged in)
    /// as TOML and exit.
    #[arg(long, global = true)]
    show_config: bool,

    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the configured data source and report split sizes; writes the
    /// slice dictionary for CSV sources.
    Ingest {
        #[arg(long)]
        dictionary_out: Option<PathBuf>,
    },
    /// Write one synthetic draw as CSV.
    Synth {
        #[arg(long, default_value = "synth-criteo")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        draw: u64,
        #[arg(long)]
        k_max: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Optimize on the training split at one epsilon and print the report.
    Optimize {
        #[arg(long)]
        epsilon: f64,
    },
    /// Run the full sweep and write result files.
    Run {
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Fit on one synthetic draw and compare against a grid on another.
    Generalize {
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        /// Evaluate on the training draw (self-check).
        #[arg(long)]
        same_draw: bool,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.apply_env();
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    if cli.show_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (try --help)".into()));
    };
    match command {
        Command::Ingest { dictionary_out } => {
            let data = load_data(&cfg)?;
            println!(
                "train records: {}\ntest records: {}\nrejected rows: {}\nslices: {}\nqueries: {}",
                data.train.len(),
                data.test.len(),
                data.rejected,
                data.train.num_slices(),
                data.train.num_queries()
            );
            if let (Some(path), Some(dict)) = (dictionary_out, data.dictionary) {
                std::fs::write(path, dict.to_json()?)?;
            }
        }
        Command::Synth {
            preset,
            seed,
            draw,
            k_max,
            output,
        } => {
            let preset = Preset::from_name(&preset)
                .ok_or_else(|| Error::Config(format!("unknown preset {preset:?}")))?;
            let mut source = SynthSource::from_preset(preset);
            source.k_max = k_max;
            let synth = source.resolve(seed);
            let data = generate_draw(&synth, draw)?;
            write_csv(&data, &synth, std::fs::File::create(&output)?)?;
            eprintln!("wrote {} records to {}", data.dataset.len(), output.display());
        }
        Command::Optimize { epsilon } => {
            let data = load_data(&cfg)?;
            let tau = data.train.median_tau()?;
            let ctx = ObjectiveContext64::new(&data.train, tau, epsilon, cfg.gamma)?;
            let report = ara_budget::optimizer::optimize(&ctx, &cfg.optimizer)?;
            println!("{}", report.to_json()?);
        }
        Command::Run { output_dir } => {
            let out = run_experiment(&cfg)?;
            let dir = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
            for path in emit_outputs(&out, &cfg, &dir)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Generalize { epsilon, same_draw } => {
            let Source::Synth(_) = cfg.source else {
                return Err(Error::Config("generalize needs a synthetic source".into()));
            };
            let synth = cfg.synth().expect("synthetic source");
            let report = generalization_check(&synth, epsilon, cfg.gamma, &cfg.optimizer, same_draw)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
