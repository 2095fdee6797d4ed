use clap::{Args, Parser, Subcommand};
use seqdiff_cli::config::{resolve_config, ExperimentConfig};
use seqdiff_cli::{
    cmd_evaluate, cmd_generate, cmd_oracle, cmd_plot, cmd_prepare, cmd_train_codec,
    cmd_train_score,
};
use seqdiff_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Latent score-based time-series generation pipeline.
#[derive(Parser)]
#[command(name = "seqdiff", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file path, or preset:NAME (see `seqdiff presets`).
    #[arg(long)]
    config: String,
    /// Override the experiment's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training missing rate (0 disables the regime).
    #[arg(long)]
    missing_rate: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Window, split, normalise and write the dataset containers.
    Prepare(Common),
    /// Pre-train the autoencoder.
    TrainCodec(Common),
    /// Train the conditional score network.
    TrainScore(Common),
    /// Sample complete windows from the trained model.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Override the reverse-SDE step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score generated windows against held-out real windows.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Real container (defaults to the prepared test split).
        #[arg(long)]
        real: Option<PathBuf>,
        /// Synthetic container (defaults to the generated output).
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// KDE and t-SNE artifacts for real vs generated windows.
    Plot(Common),
    /// Run the analytic oracle suite.
    Oracle(Common),
    /// List the built-in presets.
    Presets,
}

fn apply_overrides(cfg: &mut ExperimentConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.experiment.out_dir = out.clone();
    }
    if let Some(rate) = common.missing_rate {
        cfg.data.missing_rate = if rate == 0.0 { None } else { Some(rate) };
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = resolve_config(&common.config)?;
    apply_overrides(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        "config" => 2,
        "io" => 3,
        "data" => 4,
        "shape" => 5,
        "domain" => 6,
        "numeric" => 7,
        _ => 8,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Prepare(common) => {
            let cfg = load(&common)?;
            let summary = cmd_prepare(&cfg)?;
            println!(
                "prepared {} windows (train {} / valid {} / test {}), {} observed per training window",
                summary.windows, summary.train, summary.valid, summary.test,
                summary.observed_per_window
            );
        }
        Cmd::TrainCodec(common) => {
            let cfg = load(&common)?;
            let path = cmd_train_codec(&cfg)?;
            println!("codec checkpoint written to {}", path.display());
        }
        Cmd::TrainScore(common) => {
            let cfg = load(&common)?;
            let path = cmd_train_score(&cfg)?;
            println!("score checkpoint written to {}", path.display());
        }
        Cmd::Generate { common, steps } => {
            let cfg = load(&common)?;
            let path = cmd_generate(&cfg, steps)?;
            println!("generated container written to {}", path.display());
        }
        Cmd::Evaluate { common, real, synthetic } => {
            let cfg = load(&common)?;
            let report = cmd_evaluate(&cfg, real.as_deref(), synthetic.as_deref())?;
            print!("{}", report.table_text());
        }
        Cmd::Plot(common) => {
            let cfg = load(&common)?;
            let (kde, tsne) = cmd_plot(&cfg)?;
            println!("kde: {} ({} features)", kde.png_path.display(), kde.tv_per_feature.len());
            println!("tsne: {} ({} rows)", tsne.png_path.display(), tsne.n_rows);
        }
        Cmd::Oracle(common) => {
            let cfg = load(&common)?;
            let report = cmd_oracle(&cfg)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(Error::Numeric("oracle suite reported failures".into()));
            }
        }
        Cmd::Presets => {
            for name in seqdiff_cli::preset_names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(exit_code(&err))
        }
    }
}
