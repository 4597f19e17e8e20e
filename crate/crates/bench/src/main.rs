use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ropust::config::{ExperimentConfig, Preset};
use ropust_bench::{exit_code, missing_inputs, run, Command, Workspace};

#[derive(Parser)]
#[command(
    name = "ropust",
    version,
    about = "Photonic random-projection defense experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Verb,

    /// JSON experiment config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed (overrides `seeds.global`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Adversarially train the base network (and its natural twin).
    TrainBase,
    /// Train the defended head on frozen base features.
    Finetune,
    /// Attack cascades on base and defended models, plus transfer.
    Evaluate,
    /// Single-component removals under APGD-CE and Square.
    Ablate,
    /// Retrieval-knowledge sweep.
    Sweep,
    /// Every step in order.
    All,
}

#[derive(ValueEnum, Clone, Copy)]
enum PresetArg {
    Desk,
    PaperDims,
}

fn load_config(cli: &Cli) -> ropust::Result<ExperimentConfig> {
    let preset = cli.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::PaperDims => Preset::PaperDims,
    });
    let mut text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| ropust::Error::Config(format!("{}: {e}", path.display())))?,
        None => "{}".to_string(),
    };
    if cli.seed.is_some() || cli.out.is_some() {
        let mut v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ropust::Error::Config(format!("invalid JSON: {e}")))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| ropust::Error::Config("config must be a JSON object".into()))?;
        if let Some(seed) = cli.seed {
            let seeds = obj.entry("seeds").or_insert_with(|| serde_json::json!({}));
            seeds
                .as_object_mut()
                .ok_or_else(|| ropust::Error::Config("`seeds` must be an object".into()))?
                .insert("global".into(), seed.into());
        }
        if let Some(out) = &cli.out {
            obj.insert("out_dir".into(), out.display().to_string().into());
        }
        text = v.to_string();
    }
    ExperimentConfig::from_json_str(&text, preset)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let command = match cli.command {
        Verb::TrainBase => Command::TrainBase,
        Verb::Finetune => Command::Finetune,
        Verb::Evaluate => Command::Evaluate,
        Verb::Ablate => Command::Ablate,
        Verb::Sweep => Command::Sweep,
        Verb::All => Command::All,
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            log::error!("event=config_error detail={e}");
            return ExitCode::from(2);
        }
    };
    let missing = missing_inputs(&cfg.out_dir, command);
    if !missing.is_empty() {
        log::error!(
            "event=missing_inputs command={} files={:?}",
            command.name(),
            missing
        );
        return ExitCode::from(3);
    }
    let result = Workspace::create(cfg).and_then(|ws| run(command, &ws));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("event=failed command={} detail={e}", command.name());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
