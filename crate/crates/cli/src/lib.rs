//! Command-line front end: dataset synthesis, training, evaluation,
//! prediction, the normalization ablation and the verification suites.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use aresunet::verify::Scope;
use clap::{Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_eval, cmd_predict, cmd_synth, cmd_train, cmd_verify, TrainSummary};
pub use config::{CommandKind, ConfigError, Overrides, RunConfig};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "aresunet", version, about = "Volumetric segmentation with an atrous residual U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset into --out.
    Synth {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Volume extents as VxHxW; defaults to the model input shape.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
    },
    /// Train on --data and write history.log, best.ckpt and report.txt into --out.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Report metrics of a checkpoint on every volume in --data.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict the mask of one image.
    Predict {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image stem, e.g. `data/case01.img`.
        #[arg(long)]
        volume: PathBuf,
        /// Stem of the mask to write, e.g. `out/case01.msk`.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the layer-norm and batch-norm arms side by side.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the gradient and oracle suites.
    Verify {
        #[arg(long, default_value = "all")]
        scope: Scope,
    },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected VxHxW, got `{s}`"))
}

/// Exit status for an error: the first recognised cause in its chain decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<aresunet::Error>() {
            return match e {
                aresunet::Error::Config { .. } => EXIT_CONFIG,
                aresunet::Error::Data { .. }
                | aresunet::Error::Io(_)
                | aresunet::Error::Checkpoint(_)
                | aresunet::Error::Serialization(_) => EXIT_DATA,
                aresunet::Error::NonFinite { .. } | aresunet::Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

/// Executes a parsed command line, printing results to stdout.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            overrides,
            count,
            shape,
        } => {
            let cfg = overrides.resolve(CommandKind::Synth)?;
            let shape = shape.unwrap_or(cfg.model.input_shape);
            let ids = cmd_synth(&cfg.out, count, shape, cfg.train.seed)?;
            println!("wrote {} volumes to {}", ids.len(), cfg.out.display());
        }
        Command::Train { overrides } => {
            let cfg = overrides.resolve(CommandKind::Train)?;
            let summary = cmd_train(&cfg)?;
            for r in &summary.outcome.history {
                println!("{}", serde_json::to_string(r)?);
            }
            print!("{}", summary.report.render());
        }
        Command::Eval { overrides, checkpoint } => {
            let cfg = overrides.resolve(CommandKind::Eval)?;
            cfg.windowing.validate()?;
            let dir = cfg.data_dir()?;
            let report = cmd_eval(&checkpoint, dir, cfg.windowing.stride)?;
            let text = report.render();
            if overrides.out.is_some() {
                std::fs::create_dir_all(&cfg.out)?;
                std::fs::write(cfg.out.join(commands::REPORT_FILE), &text)?;
            }
            print!("{text}");
        }
        Command::Predict {
            overrides,
            checkpoint,
            volume,
            output,
        } => {
            let cfg = overrides.resolve(CommandKind::Predict)?;
            cfg.windowing.validate()?;
            cmd_predict(&checkpoint, &volume, &output, cfg.windowing.stride)?;
            println!("wrote {}", output.display());
        }
        Command::Ablate { overrides } => {
            let cfg = overrides.resolve(CommandKind::Ablate)?;
            let (_, file) = cmd_ablate(&cfg)?;
            print!("{}", file.render());
        }
        Command::Verify { scope } => {
            let report = cmd_verify(scope)?;
            println!("{report}");
            let failed = report.failures().count();
            if failed > 0 {
                return Err(aresunet::Error::Numeric(format!("{failed} verification checks failed")).into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("16x32x32"), Ok([16, 32, 32]));
        assert!(parse_shape("16x32").is_err());
        assert!(parse_shape("16xax32").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let config: anyhow::Error = ConfigError::new("x", "y").into();
        assert_eq!(exit_code(&config), EXIT_CONFIG);
        let data: anyhow::Error = aresunet::Error::Data {
            path: "p".into(),
            reason: "r".into(),
        }
        .into();
        assert_eq!(exit_code(&data.context("while loading")), EXIT_DATA);
        let numeric: anyhow::Error = aresunet::Error::Numeric("nan".into()).into();
        assert_eq!(exit_code(&numeric), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_OTHER);
    }

    #[test]
    fn command_line_parses() {
        let cli = Cli::try_parse_from([
            "aresunet", "train", "--norm", "batch", "--batch-size", "2", "--precision", "64", "--data", "d",
        ])
        .unwrap();
        let Command::Train { overrides } = cli.command else { panic!() };
        let cfg = overrides.resolve(CommandKind::Train).unwrap();
        assert_eq!(cfg.model.norm_kind, aresunet::blocks::NormKind::Batch);
        assert!(Cli::try_parse_from(["aresunet", "train", "--precision", "16"]).is_err());
        assert!(Cli::try_parse_from(["aresunet", "verify", "--scope", "grad"]).is_ok());
    }
}
