use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rrm_cli::*;
use rrm_core::attacks::Norm;
use rrm_core::data::SyntheticSpec;
use rrm_core::robustify::RobustifyConfig;
use rrm_core::trainers::parse_real;
use rrm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rrm", version, about = "Robust representation matching: training, attacks and benchmarks")]
struct Cli {
    /// Worker threads for data-parallel work. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic robust/non-robust feature task.
    GenData(GenDataCmd),
    /// Train a model from a config file.
    Train(TrainCmd),
    /// Natural and adversarial accuracy of a checkpoint.
    Attack(AttackCmd),
    /// Build a robustified dataset from a frozen teacher.
    Robustify(RobustifyCmd),
    /// Train RRM students over a list of lambdas and evaluate each.
    SweepLambda(SweepCmd),
}

#[derive(Args)]
struct GenDataCmd {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 5)]
    d_robust: usize,
    #[arg(long, default_value_t = 400)]
    d_nonrobust: usize,
    #[arg(long, default_value_t = 2.0)]
    robust_margin: f64,
    #[arg(long, default_value_t = 0.2)]
    nonrobust_margin: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.5)]
    flip_budget: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Frozen teacher checkpoint, required for rrm and kd.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AttackCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "linf")]
    norm: String,
    /// Radius; fractions such as 8/255 are accepted.
    #[arg(long, default_value = "8/255", allow_hyphen_values = true)]
    eps: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    step_size: Option<String>,
    /// Valid input range as `lo,hi`.
    #[arg(long, default_value = "0,1", conflicts_with = "unbounded")]
    pixel_box: String,
    /// Do not clamp adversarial inputs.
    #[arg(long)]
    unbounded: bool,
    /// Attack logits divided by this temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RobustifyCmd {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    step_size: f64,
    /// Step along the raw gradient instead of its unit-norm direction.
    #[arg(long)]
    raw_gradient: bool,
    /// Clamp iterates into `lo,hi`.
    #[arg(long)]
    clamp: Option<String>,
    /// Robustify only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    teacher: PathBuf,
    /// Comma-separated, e.g. `1e-5,5e-5,1e-3,1e-2,1e-1`.
    #[arg(long, default_value = "1e-5,5e-5,1e-3,1e-2,1e-1")]
    lambdas: String,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_pair(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok([parse_real(a.trim())?, parse_real(b.trim())?]),
        _ => Err(Error::Config(format!("expected `lo,hi`, got {s:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::GenData(c) => {
            let spec = SyntheticSpec {
                n: c.n,
                d_robust: c.d_robust,
                d_nonrobust: c.d_nonrobust,
                robust_margin: c.robust_margin,
                nonrobust_margin: c.nonrobust_margin,
                noise: c.noise,
                flip_budget: c.flip_budget,
            };
            let m = cmd_gen_data(&GenDataArgs { spec, n_test: c.n_test, seed: c.seed, out_dir: c.out_dir })?;
            println!("wrote {} dataset(s) to {}", m.artifacts.len(), m.out_dir.display());
        }
        Command::Train(c) => {
            let out = cmd_train(&TrainArgs {
                config: c.config,
                data: c.data,
                teacher: c.teacher,
                out_dir: c.out_dir.clone(),
                threads,
            })?;
            let r = &out.report;
            println!(
                "{}: {} epochs, {:.3}s/epoch (±{:.3}), {} updates, checkpoint in {}",
                r.method,
                r.epochs,
                r.epoch_time_mean_s,
                r.epoch_time_ci95_s,
                r.updates,
                c.out_dir.display()
            );
        }
        Command::Attack(c) => {
            let args = AttackArgs {
                checkpoint: c.checkpoint,
                data: c.data,
                norm: c.norm.parse::<Norm>()?,
                epsilon: parse_real(&c.eps)?,
                steps: c.steps,
                restarts: c.restarts,
                step_size: c.step_size.as_deref().map(parse_real).transpose()?,
                pixel_box: if c.unbounded { None } else { Some(parse_pair(&c.pixel_box)?) },
                temperature: c.temperature,
                seed: c.seed,
                out_dir: c.out_dir,
                threads,
            };
            let r = cmd_attack(&args)?;
            println!("natural {:.4}  adversarial {:.4}  ({} samples)", r.natural_acc, r.adv_acc, r.samples);
        }
        Command::Robustify(c) => {
            let config = RobustifyConfig {
                steps: c.steps,
                step_size: c.step_size,
                normalize_gradient: !c.raw_gradient,
                clamp_box: c.clamp.as_deref().map(parse_pair).transpose()?,
            };
            let args = RobustifyArgs {
                teacher: c.teacher,
                data: c.data,
                config,
                limit: c.limit,
                seed: c.seed,
                out_dir: c.out_dir,
                threads,
            };
            let ds = cmd_robustify(&args)?;
            println!("robustified {} samples into {}", ds.len(), args.out_dir.join(ROBUST_DATA_FILE).display());
        }
        Command::SweepLambda(c) => {
            let args = SweepArgs {
                config: c.config,
                data: c.data,
                eval_data: c.eval_data,
                teacher: c.teacher,
                lambdas: parse_lambda_list(&c.lambdas)?,
                steps: c.steps,
                restarts: c.restarts,
                seed: c.seed,
                out_dir: c.out_dir,
                threads,
            };
            let rows = cmd_sweep_lambda(&args)?;
            print!("{}", sweep_to_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
