//! `microvit` command-line front end.
//!
//! Machine-readable JSON goes to stdout; diagnostics go to stderr.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use microvit_core::bench::{run_bench, BenchConfig, PowerProvider, Stop};
use microvit_core::blocks::{MdtaBlock, RepDwBlock, SdtaBlock};
use microvit_core::grad::check_recorded;
use microvit_core::init::Init;
use microvit_core::model::count;
use microvit_core::{io, Attention, Error, Mode, Model32, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  verification failed (verify-fusion tolerance, gradcheck threshold)
  2  usage error (unknown flag, missing or malformed argument)
  3  file could not be read or written
  4  malformed weight file (magic, version, truncation, duplicate or unknown tensor)
  5  shape mismatch (input shape, tensor shape, raw input length)
  6  invalid configuration or argument value
  7  numeric failure (NaN or infinity)";

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "microvit", version, about = "Reparameterizable vision backbone toolkit", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Sdta,
    Mdta,
}

impl From<AttentionArg> for Attention {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Sdta => Attention::Sdta,
            AttentionArg::Mdta => Attention::Mdta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Train,
    Deploy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BlockArg {
    Repdw,
    Sdta,
    Mdta,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded train-form weights.
    Build {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "sdta")]
        attention: AttentionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse every reparameterizable unit and write deploy-form weights.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare train-form and fused forward passes block by block.
    VerifyFusion {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic parameter and multiply-accumulate counts.
    Count {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_enum, default_value = "deploy")]
        form: FormArg,
        #[arg(long, value_enum, default_value = "sdta")]
        attention: AttentionArg,
    },
    /// Top-K classes for a raw little-endian f32 NCHW input.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// `N,C,H,W`
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Time forward passes and derive throughput, energy per image and efficiency.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, conflicts_with = "duration", required_unless_present = "duration")]
        iters: Option<usize>,
        /// Seconds of measured forward time.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// `constant:WATTS` or `trace:PATH`.
        #[arg(long)]
        power: String,
        /// Top-1 accuracy in percent.
        #[arg(long)]
        acc: f64,
        #[arg(long, default_value = "user-supplied")]
        acc_source: String,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reverse-mode gradient of one train-form block against central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        block: BlockArg,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        hw: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Core(Error),
    Verification(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::BadMagic(_)
        | Error::Version(_)
        | Error::Truncated(_)
        | Error::DuplicateTensor(_)
        | Error::Format(_)
        | Error::Json(_) => 4,
        Error::Shape(_) => 5,
        Error::NonFinite(_) => 7,
        _ => 6,
    }
}

fn parse_power(arg: &str) -> Result<PowerProvider, Error> {
    match arg.split_once(':') {
        Some(("constant", w)) => {
            let watts = w
                .parse()
                .map_err(|_| Error::Config(format!("bad wattage `{w}`")))?;
            PowerProvider::constant(watts)
        }
        Some(("trace", path)) => PowerProvider::load_trace(path.as_ref()),
        _ => Err(Error::Config(format!("power must be constant:W or trace:PATH, got `{arg}`"))),
    }
}

fn parse_shape(arg: &str) -> Result<[usize; 4], Error> {
    let bad = || Error::Shape(format!("--shape must be N,C,H,W with positive integers, got `{arg}`"));
    let dims = arg
        .split(',')
        .map(|d| d.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(bad)?;
    dims.try_into().map_err(|_| bad())
}

fn top_k(scores: &[f32], k: usize) -> Vec<Value> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| json!({ "class": i, "score": scores[i] }))
        .collect()
}

fn run(command: Command) -> Result<Value, Failure> {
    match command {
        Command::Build {
            variant,
            seed,
            attention,
            out,
        } => {
            let config = variant.config().with_attention(attention.into());
            let model = Model32::build(&config, seed)?;
            io::save(&model, &out)?;
            eprintln!("wrote {} train-form parameters to {}", model.param_count(), out.display());
            Ok(json!({
                "variant": config.variant,
                "mode": "train",
                "params": model.param_count(),
                "path": out,
            }))
        }
        Command::Fuse { input, out } => {
            let model: Model32 = io::load(&input)?;
            let before = model.param_count();
            let fused = model.deploy()?;
            io::save(&fused, &out)?;
            Ok(json!({
                "variant": fused.config().variant,
                "mode": "deploy",
                "params_before": before,
                "params_after": fused.param_count(),
                "path": out,
            }))
        }
        Command::VerifyFusion {
            input,
            samples,
            tol,
            seed,
        } => {
            let model: Model32 = io::load(&input)?;
            let checks = model.verify_blocks(samples, tol, &mut ChaCha8Rng::seed_from_u64(seed))?;
            for c in &checks {
                eprintln!("{:<24} {:.3e} {}", c.block, c.max_abs_diff, if c.pass { "ok" } else { "FAIL" });
            }
            let pass = checks.iter().all(|c| c.pass);
            let report = json!({ "tol": tol, "samples": samples, "pass": pass, "blocks": checks });
            if pass {
                Ok(report)
            } else {
                Err(Failure::Verification(report))
            }
        }
        Command::Count {
            variant,
            resolution,
            form,
            attention,
        } => {
            let config = variant.config().with_attention(attention.into());
            let mode = match form {
                FormArg::Train => Mode::Train,
                FormArg::Deploy => Mode::Deploy,
            };
            let r = resolution.unwrap_or(config.input_resolution);
            Ok(serde_json::to_value(count(&config, mode, r)?).map_err(Error::from)?)
        }
        Command::Infer {
            model,
            input,
            shape,
            topk,
        } => {
            let shape = parse_shape(&shape)?;
            let model: Model32 = io::load(&model)?;
            let x: Tensor<f32> = io::read_raw(&input, shape)?;
            let scores = model.forward(&x)?;
            let results: Vec<Value> = (0..scores.rows())
                .map(|i| json!({ "sample": i, "top": top_k(scores.row(i), topk) }))
                .collect();
            Ok(json!({ "results": results }))
        }
        Command::Bench {
            model,
            batch,
            iters,
            duration,
            warmup,
            power,
            acc,
            acc_source,
            deterministic,
            seed,
            out,
        } => {
            let provider = parse_power(&power)?;
            let stop = match (iters, duration) {
                (Some(n), _) => Stop::Iterations(n),
                (None, Some(s)) => Stop::Seconds(s),
                (None, None) => return Err(Error::Config("pass --iters or --duration".into()).into()),
            };
            let model: Model32 = io::load(&model)?;
            let config = BenchConfig {
                batch_size: batch,
                warmup,
                stop,
                accuracy: acc,
                accuracy_source: acc_source,
                deterministic,
                input_seed: seed,
            };
            let report = run_bench(&model, &config, &provider)?;
            if report.metadata.trace_wrapped {
                eprintln!("warning: power trace shorter than the measurement window; replayed cyclically");
            }
            let value = serde_json::to_value(&report).map_err(Error::from)?;
            let text = serde_json::to_string_pretty(&value).map_err(Error::from)?;
            std::fs::write(&out, text).map_err(Error::from)?;
            Ok(value)
        }
        Command::Gradcheck {
            block,
            channels,
            hw,
            eps,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([1, channels, hw, hw], 1.0, &mut rng);
            let err = match block {
                BlockArg::Repdw => {
                    let b = RepDwBlock::<f64>::random(channels, 2, 1e-5, Init::Randomized, &mut rng)?;
                    check_recorded(&b, &x, eps, &mut rng)?
                }
                BlockArg::Sdta => {
                    let b = SdtaBlock::<f64>::random(channels, 2, 1e-5, Init::Randomized, &mut rng)?;
                    check_recorded(&b, &x, eps, &mut rng)?
                }
                BlockArg::Mdta => {
                    let b = MdtaBlock::<f64>::random(channels, 2, 1e-5, Init::Randomized, &mut rng)?;
                    check_recorded(&b, &x, eps, &mut rng)?
                }
            };
            let pass = err < GRAD_TOLERANCE;
            let report = json!({
                "block": format!("{block:?}").to_lowercase(),
                "channels": channels,
                "hw": hw,
                "eps": eps,
                "max_rel_error": err,
                "tolerance": GRAD_TOLERANCE,
                "pass": pass,
            });
            if pass {
                Ok(report)
            } else {
                Err(Failure::Verification(report))
            }
        }
    }
}

/// Writes one JSON document to stdout; a closed pipe is not an error.
fn emit(value: &Value) {
    let _ = writeln!(std::io::stdout().lock(), "{value}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(value) => {
            emit(&value);
            ExitCode::SUCCESS
        }
        Err(Failure::Verification(value)) => {
            emit(&value);
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
