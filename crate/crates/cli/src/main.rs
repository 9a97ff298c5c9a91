use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use osegnet::checkpoint::load_checkpoint;
use osegnet::data::{load_index, load_pgm, save_pgm, synth_generate, Split};
use osegnet::eval::{evaluate, predict_image};
use osegnet::gradcheck::{run_gradcheck, GradcheckOptions};
use osegnet::train::{load_split, train_run, CHECKPOINT_FILE};
use osegnet::{Error, OpKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "osegnet",
    version,
    about = "Segmentation with operational decoder layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ellipse dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model; writes run.log, log.csv and a checkpoint to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the mask of one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input image (binary PGM at the model's input size).
        #[arg(long)]
        image: PathBuf,
        /// Output PGM path.
        #[arg(long)]
        mask: PathBuf,
        /// Write the thresholded {0, 255} mask instead of probabilities.
        #[arg(long)]
        binary: bool,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// End-to-end model input size (multiple of 32).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Minimum number of model parameters checked end to end.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Corrupt one backward rule, e.g. `conv-transpose:1.5`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset index file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!(usage(format!("--set expects KEY=VALUE, got `{kv}`")));
            };
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.data_index = data.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Marks an error as a usage error (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: String) -> Usage {
    Usage(msg)
}

/// Signals a numeric check that ran but did not pass (exit code 1).
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn parse_fault(spec: &str) -> anyhow::Result<(OpKind, f32)> {
    let (kind, factor) = spec.split_once(':').unwrap_or((spec, "1.5"));
    let kind = match kind {
        "conv" => OpKind::Conv2d,
        "conv-transpose" => OpKind::ConvTranspose2d,
        "power" => OpKind::PowerExpand,
        "batchnorm" => OpKind::BatchNorm,
        "dice" => OpKind::Dice,
        "focal" => OpKind::Focal,
        "activation" => OpKind::Activation,
        other => bail!(usage(format!("unknown fault kind `{other}`"))),
    };
    let factor = factor
        .parse()
        .map_err(|_| usage(format!("bad fault factor `{factor}`")))?;
    Ok((kind, factor))
}

fn checkpoint_path(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let index = synth_generate(count, size, seed, &out)?;
            println!("{}", index.display());
        }
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let index = load_index(&cfg.data_index)?;
            for w in &index.warnings {
                eprintln!("warning: {w}");
            }
            let outcome = train_run(&cfg, &index, resume)?;
            for log in &outcome.logs {
                println!(
                    "epoch {:>3}  loss {:.5}  train pixel F1 {:.4}",
                    log.epoch, log.mean_loss, log.train_pixel_f1
                );
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let path = checkpoint_path(&cfg, &checkpoint);
            let model = load_checkpoint(&path, &cfg.model())
                .with_context(|| format!("loading {}", path.display()))?;
            let index = load_index(&cfg.data_index)?;
            let test = load_split(&index, Split::Test, cfg.input_size)?;
            let report = evaluate(&model, &test, cfg.threshold as f32)?;
            report.write_csv(&cfg.out_dir)?;
            print!("{}", report.render(&format!("OSegNet Q={}", cfg.q_order)));
        }
        Command::Predict {
            common,
            checkpoint,
            image,
            mask,
            binary,
        } => {
            let cfg = common.resolve()?;
            let path = checkpoint_path(&cfg, &checkpoint);
            let model = load_checkpoint(&path, &cfg.model())
                .with_context(|| format!("loading {}", path.display()))?;
            let input = load_pgm(&image)?;
            let out = predict_image(&model, &input, binary, cfg.threshold as f32)?;
            save_pgm(&out, &mask)?;
            println!("{}", mask.display());
        }
        Command::Gradcheck {
            q,
            seed,
            size,
            samples,
            inject_fault,
        } => {
            let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
            let opts = GradcheckOptions {
                q_order: q,
                seed,
                size,
                samples,
                fault,
            };
            let report = run_gradcheck(&opts)?;
            print!("{}", report.render());
            if let Some(worst) = report.worst_failure() {
                return Err(CheckFailed(format!(
                    "gradient check failed: {} `{}` relative error {:.3e} ≥ {:e}",
                    worst.kind, worst.label, worst.error, worst.threshold
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<Usage>() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
