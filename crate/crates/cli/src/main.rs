mod commands;
mod config;
mod error;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtslvr::synth::SynthConfig;

use commands::{EvaluateOpts, InvarianceOpts, PretrainOpts, SynthOpts};
use error::CliError;

/// Multi-task self-supervised audio representations: pre-training,
/// few-shot evaluation and invariance analysis.
#[derive(Parser)]
#[command(name = "mtslvr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override a config key, e.g. `--set objective.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a backbone with the contrastive and augmentation-prediction losses.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest CSV (`path,label,duration_s`).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV; defaults to `<out>.losses.csv`.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Optional per-step loss CSV.
        #[arg(long)]
        step_log: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// N-way K-shot linear-probe evaluation of a frozen checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long)]
        k_shot: Option<usize>,
        /// Query clips per class.
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-head, per-augmentation Mahalanobis invariance scores.
    Invariance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        param_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Audition augmentations on a WAV file.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Parameter totals of every backbone variant.
    ParamCount {
        #[arg(long, default_value = "resnet18")]
        preset: String,
    },
    /// Write the bundled synthetic corpus as WAV files plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write this many classes of pure noise instead of tones.
        #[arg(long)]
        noise_classes: Option<usize>,
    },
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Apply `KIND[:key=value,...]` augmentations in order; unset
    /// parameters are drawn at random.
    Preview {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "aug", required = true)]
        augs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn push(overrides: &mut Vec<String>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={}", v.to_string()));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain {
            config,
            data,
            out,
            loss_log,
            step_log,
            overrides,
        } => commands::pretrain_cmd(PretrainOpts {
            config: config.as_deref(),
            data: &data,
            out: &out,
            loss_log: loss_log.as_deref(),
            step_log: step_log.as_deref(),
            overrides: &overrides.set,
        }),
        Command::Evaluate {
            ckpt,
            data,
            n_way,
            k_shot,
            q,
            tasks,
            seed,
            out,
            overrides,
        } => {
            let mut set = overrides.set;
            push(&mut set, "eval.n_way", n_way);
            push(&mut set, "eval.k_shot", k_shot);
            push(&mut set, "eval.queries", q);
            push(&mut set, "eval.tasks", tasks);
            push(&mut set, "eval.seed", seed);
            let summary = commands::evaluate_cmd(EvaluateOpts {
                ckpt: &ckpt,
                data: &data,
                out: &out,
                overrides: set,
            })?;
            println!("{summary}");
            Ok(())
        }
        Command::Invariance {
            ckpt,
            data,
            param_samples,
            seed,
            out,
            overrides,
        } => {
            let mut set = overrides.set;
            push(&mut set, "invariance.param_samples", param_samples);
            push(&mut set, "invariance.seed", seed);
            let summary = commands::invariance_cmd(InvarianceOpts {
                ckpt: &ckpt,
                data: &data,
                out: &out,
                overrides: set,
            })?;
            println!("{summary}");
            Ok(())
        }
        Command::Augment(AugmentCommand::Preview { input, augs, out, seed }) => {
            for p in commands::augment_preview(&input, &augs, &out, seed)? {
                println!("{p}");
            }
            Ok(())
        }
        Command::ParamCount { preset } => {
            println!("{:<10} {:>12} {:>8}", "variant", "parameters", "ratio");
            for (v, n, r) in commands::param_counts(&preset)? {
                println!("{:<10} {:>12} {:>8.3}", v.as_str(), n, r);
            }
            Ok(())
        }
        Command::Synth {
            out,
            clips_per_class,
            duration_s,
            sample_rate,
            seed,
            noise_classes,
        } => {
            let path = commands::synth_cmd(SynthOpts {
                out: &out,
                noise_classes,
                config: SynthConfig {
                    clips_per_class,
                    duration_s,
                    sample_rate,
                    seed,
                },
            })?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
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
