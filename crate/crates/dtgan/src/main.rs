use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dtgan", version, about = "Text-conditioned shape GAN: verify gradients, train, sample, inspect attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check analytic gradients against central finite differences
    Gradcheck {
        /// primitives | modules | losses | e2e | all
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Train a model; writes config.resolved, losses.csv, checkpoints and
    /// sample grids into the output directory
    Train {
        /// `key = value` config file (defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// KEY=VALUE config override (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Disable a component: cam | pam | cadailn | visual_loss (repeatable)
        #[arg(long)]
        ablate: Vec<String>,
        /// Output directory (overrides the out_dir config key)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate images for one caption from a checkpoint
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Caption over the synthetic vocabulary, e.g. "a small red circle
        /// on a black background"
        #[arg(long)]
        caption: String,
        /// Number of images (distinct noise draws)
        #[arg(short, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Export attention maps of one generator stage as grayscale images
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// 1-based stage index; defaults to the last stage
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value = "attn")]
        out: PathBuf,
    },
    /// Proxy metrics (color match, diversity) for a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short, default_value_t = 96)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cmd: Cmd) -> dtgan::Result<()> {
    match cmd {
        Cmd::Gradcheck { scope } => dtgan::cli::cmd_gradcheck(&scope),
        Cmd::Train { config, set, ablate, out } => {
            let out_dir = dtgan::cli::cmd_train(config.as_deref(), &set, &ablate, out.as_deref())?;
            println!("run complete; outputs in {}", out_dir.display());
            Ok(())
        }
        Cmd::Sample { ckpt, caption, n, seed, out } => {
            let files = dtgan::cli::cmd_sample(&ckpt, &caption, n, seed, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Cmd::Attn { ckpt, caption, seed, layer, out } => {
            let files = dtgan::cli::cmd_attn(&ckpt, &caption, seed, layer, &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Cmd::Eval { ckpt, n, seed } => dtgan::cli::cmd_eval(&ckpt, n, seed).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
