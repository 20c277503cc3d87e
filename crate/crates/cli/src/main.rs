use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vitq_cli::{
    cmd_calibrate, cmd_eval, cmd_landscape, cmd_optimize, cmd_report, cmd_toy, CliError, RunConfig, Stages,
    FINAL_MODEL,
};
use vitq_core::toy::ToyConfig;

#[derive(Parser)]
#[command(name = "vitq", version, about = "Post-training quantization of vision transformer blocks")]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded kernels.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate all quantizers and write the calibration artifact.
    Calibrate,
    /// Run SOS stages 1, 2, 3 or all of them.
    Optimize {
        #[arg(long, default_value = "all")]
        stages: Stages,
    },
    /// Accuracy and block losses of a quantized model.
    Eval {
        /// Defaults to the final model in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to the configured evaluation data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Loss landscapes of one block under three quantization configurations.
    Landscape {
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// UQ/LQ/SULQ comparison on post-Softmax activations.
    Report {
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, value_delimiter = ',', default_value = "3,4")]
        bits: Vec<u32>,
    },
    /// Build the synthetic toy model and datasets.
    Toy {
        #[arg(long, default_value = "toy")]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    vitq_core::tensor::set_deterministic(cli.deterministic);
    match &cli.command {
        Command::Toy { dir, iterations } => {
            let toy = ToyConfig {
                seed: cli.seed.unwrap_or(0),
                ..ToyConfig::default()
            };
            let path = cmd_toy(dir, &toy, *iterations)?;
            println!("{}", path.display());
        }
        Command::Calibrate => {
            let path = cmd_calibrate(&load_config(&cli)?)?;
            println!("{}", path.display());
        }
        Command::Optimize { stages } => {
            let path = cmd_optimize(&load_config(&cli)?, *stages)?;
            println!("{}", path.display());
        }
        Command::Eval { model, data } => {
            let cfg = load_config(&cli)?;
            let model = model.clone().unwrap_or_else(|| cfg.output_dir.join(FINAL_MODEL));
            let data = data
                .clone()
                .or_else(|| cfg.eval_data.clone())
                .ok_or_else(|| CliError::Config("no evaluation data configured".into()))?;
            let m = cmd_eval(&cfg, &model, &data)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Command::Landscape { block, points } => {
            let mut cfg = load_config(&cli)?;
            if let Some(b) = block {
                cfg.landscape.block = *b;
            }
            if let Some(p) = points {
                cfg.landscape.points = *p;
            }
            for p in cmd_landscape(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Report { block, bits } => {
            cmd_report(&load_config(&cli)?, *block, bits)?;
        }
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
