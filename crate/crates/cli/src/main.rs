use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clab::evalbench::CondMode;
use clab::{Precision, Result};
use clab_cli::commands::{self, cond_name, SampleArgs, TrainArgs};
use clab_cli::config::RunConfig;
use clab_cli::exit_code;

#[derive(Parser)]
#[command(name = "clab", version, about = "Train, sample and evaluate a flow-matching MMDiT with a key/value-only B-language branch")]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every section seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CondArg {
    A,
    B,
    Ab,
}

impl From<CondArg> for CondMode {
    fn from(c: CondArg) -> Self {
        match c {
            CondArg::A => CondMode::A,
            CondArg::B => CondMode::B,
            CondArg::Ab => CondMode::Ab,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage: 0 backbone, 1 branch with alignment, 2 B-only fine-tune.
    Train {
        #[arg(long)]
        stage: u8,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Periodic checkpoint of this stage to continue from.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Stop once this many steps are done, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Generate images for a caption.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// a: backbone text only; b: B branch only (backbone text empty); ab: both.
        #[arg(long, value_enum, default_value = "b")]
        cond: CondArg,
        #[arg(long)]
        caption_a: Option<String>,
        #[arg(long)]
        caption_b: Option<String>,
        /// Classifier-free guidance scale (default from `sampler.guidance`, 3.5).
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
    },
    /// Conditional accuracy, per-attribute breakdown and MMD for one mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "b")]
        cond: CondArg,
    },
    /// Stage-1 loss and query-update ablation from one stage-0 checkpoint.
    Ablate {
        #[arg(long)]
        init: PathBuf,
    },
    /// Finite-difference check of every primitive and the end-to-end loss (64-bit).
    Gradcheck,
    /// Dump rendered scenes and captions with a manifest.
    Datagen,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        c.seed = cli.seed;
    }
    if let Some(o) = &cli.out {
        c.out = o.clone();
    }
    if let Some(p) = cli.precision {
        c.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    c.resolved()
}

macro_rules! by_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::Train { stage, init, resume, stop_after } => {
            let args = TrainArgs { stage, init, resume, stop_after };
            let o = by_precision!(cfg, cmd_train(&cfg, &args))?;
            if let Some(r) = &o.last {
                println!(
                    "stage {} step {} l_gen {:.5} l_p {:.5} l_inter {:.5} gate {}",
                    r.stage, r.step, r.l_gen, r.l_p, r.l_inter, r.gate_fired
                );
            }
            let state = if o.completed() { "complete" } else { "stopped" };
            println!("{state} at {}/{} steps; checkpoint {}", o.steps_done, o.steps_total, o.checkpoint.display());
            println!("metrics {}", o.metrics.display());
        }
        Command::Sample { checkpoint, cond, caption_a, caption_b, guidance, count, resolution } => {
            let args = SampleArgs { checkpoint, cond: cond.into(), caption_a, caption_b, guidance, count, resolution };
            for r in by_precision!(cfg, cmd_sample(&cfg, &args))? {
                let d = match (&r.decoded, &r.rejected) {
                    (Some(s), _) => format!("{s:?}"),
                    (None, Some(why)) => format!("rejected ({why:?})"),
                    _ => String::new(),
                };
                println!("{} seed {} decoded {d}", cfg.out.join(&r.file).display(), r.seed);
            }
        }
        Command::Eval { checkpoint, cond } => {
            let cond: CondMode = cond.into();
            let r = by_precision!(cfg, cmd_eval(&cfg, &checkpoint, cond))?;
            print!("{}", commands::report_table(&r));
            println!("wrote {}", cfg.out.join(format!("eval_{}.json", cond_name(cond))).display());
        }
        Command::Ablate { init } => {
            let mut progress = |arm: &str, step: u64| {
                if step % 100 == 0 {
                    eprintln!("{arm}: step {step}");
                }
            };
            let rows = by_precision!(cfg, cmd_ablate(&cfg, &init, &mut progress))?;
            print!("{}", clab::evalbench::format_table(&rows));
        }
        Command::Gradcheck => {
            let results = commands::cmd_gradcheck(&cfg)?;
            print!("{}", commands::gradcheck_table(&results));
            let failed = results.iter().filter(|r| !r.pass).count();
            println!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
        Command::Datagen => {
            let o = commands::cmd_datagen(&cfg)?;
            for m in &o.manifests {
                println!("{}", m.display());
            }
            println!("manifest sha256 {}", o.manifest_hash);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
