//! Command-line front end: directed-information estimation on recorded
//! trajectories, capacity search over channel input distributions, analytic
//! baselines, trajectory simulation, and the gradient-check battery.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dine_core::baselines::CapacityQuery;
use dine_core::channels::ChannelModel;
use dine_core::error::Error;
use dine_core::estimators::EstimateReport;
use dine_core::gradcheck;
use dine_core::nn::{save_checkpoint, Network};
use dine_core::train::{
    gaussian_input_dataset, ingest_csv, train_dine, train_dine_ndt, write_csv, write_curve_csv,
    ConstraintKind, EstimatorKind, Mode, TrainConfig, TrainOutput, TrainedEstimator,
};

#[derive(Parser)]
#[command(
    name = "dine",
    about = "Directed-information rate estimation and channel capacity search",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the directed-information (or mutual-information) rate of a
    /// recorded trajectory dataset.
    Estimate(EstimateArgs),
    /// Maximize the estimated rate over channel inputs via the generator.
    Capacity(CapacityArgs),
    /// Print the analytic/numeric capacity baseline for a channel.
    Baseline(BaselineArgs),
    /// Roll a channel open loop on Gaussian inputs and dump the trajectory.
    Simulate(SimulateArgs),
    /// Run the finite-difference gradient verification battery.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct ChannelArgs {
    /// Channel kind: awgn | ma1 | ar1_mimo
    #[arg(long)]
    channel: Option<String>,
    /// Noise variance per dimension (awgn)
    #[arg(long)]
    sigma2: Option<f64>,
    /// Noise correlation coefficient (ma1, ar1_mimo)
    #[arg(long)]
    alpha: Option<f64>,
    /// Input/output dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Average power budget (selects the average-power constraint)
    #[arg(long)]
    power: Option<f64>,
    /// Peak amplitude bound (selects the peak-power constraint)
    #[arg(long)]
    amplitude: Option<f64>,
    /// Wire the channel output back into the generator
    #[arg(long)]
    feedback: bool,
}

impl ChannelArgs {
    fn build_channel(&self) -> Result<Option<ChannelModel>, Error> {
        let Some(kind) = &self.channel else {
            return Ok(None);
        };
        let model = match kind.as_str() {
            "awgn" => ChannelModel::Awgn {
                sigma2: self.sigma2.unwrap_or(1.0),
                dim: self.dim.unwrap_or(1),
            },
            "ma1" => ChannelModel::Ma1 {
                alpha: self.alpha.unwrap_or(0.0),
                dim: self.dim.unwrap_or(1),
            },
            "ar1_mimo" => ChannelModel::Ar1Mimo {
                alpha: self.alpha.unwrap_or(0.0),
                dim: self.dim.unwrap_or(4),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown channel {other:?} (expected awgn, ma1, or ar1_mimo)"
                )))
            }
        };
        model.validate()?;
        Ok(Some(model))
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TOML config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for curve.csv and report.json
    #[arg(long)]
    out: Option<PathBuf>,
    /// Estimator: dine | mine
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    k_u: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    lr_dine: Option<f64>,
    #[arg(long)]
    lr_ndt: Option<f64>,
    #[arg(long)]
    eval_n: Option<usize>,
    #[arg(long)]
    eval_block: Option<usize>,
    #[arg(long)]
    r_dine: Option<usize>,
    #[arg(long)]
    r_ndt: Option<usize>,
    #[arg(long)]
    ref_refresh: Option<usize>,
    #[arg(long)]
    clip_exponent: Option<f64>,
    #[arg(long)]
    early_stop: bool,
    #[arg(long)]
    dine_lstm_hidden: Option<usize>,
    /// Comma-separated head layer widths, e.g. 100,50
    #[arg(long, value_delimiter = ',')]
    dine_fc_hidden: Option<Vec<usize>>,
    #[arg(long)]
    ndt_lstm_hidden: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ndt_fc_hidden: Option<Vec<usize>>,
    /// Write the trained parameters to this JSON checkpoint
    #[arg(long)]
    save_params: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, mode: Mode) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str::<TrainConfig>(&text)
                    .map_err(|e| Error::Config(format!("bad config file: {e}")))?
            }
            None => TrainConfig::default(),
        };
        cfg.mode = mode;
        if let Some(e) = &self.estimator {
            cfg.estimator = match e.as_str() {
                "dine" => EstimatorKind::Dine,
                "mine" => EstimatorKind::Mine,
                other => {
                    return Err(Error::Config(format!(
                        "unknown estimator {other:?} (expected dine or mine)"
                    )))
                }
            };
        }
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        overlay!(
            seed, steps, batch_size, seq_len, k_u, burn_in, lr_dine, lr_ndt, eval_n, eval_block,
            r_dine, r_ndt, ref_refresh, dine_lstm_hidden, dine_fc_hidden, ndt_lstm_hidden,
            ndt_fc_hidden
        );
        if self.clip_exponent.is_some() {
            cfg.clip_exponent = self.clip_exponent;
        }
        if self.early_stop {
            cfg.early_stop = true;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Trajectory CSV (header: traj,t,x0..,y0..)
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct CapacityArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    channel: ChannelArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    channel: ChannelArgs,
    /// Steps per trajectory
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Number of trajectories
    #[arg(long, default_value_t = 1)]
    trajectories: usize,
    /// Variance of the i.i.d. Gaussian inputs (0 for zero inputs)
    #[arg(long, default_value_t = 1.0)]
    input_variance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for trajectories.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numerical { .. } => 3,
        _ => 2,
    }
}

fn write_outputs(
    out_dir: Option<&Path>,
    config: &TrainConfig,
    output: &TrainOutput,
    runtime_s: f64,
) -> Result<serde_json::Value, Error> {
    let baseline = config.baseline();
    let report = &output.report;
    let json = report_json(report, config, baseline, runtime_s);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_curve_csv(&dir.join("curve.csv"), &output.curve)?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&json).unwrap(),
        )?;
    }
    Ok(json)
}

fn report_json(
    report: &EstimateReport,
    config: &TrainConfig,
    baseline: Option<(f64, &'static str)>,
    runtime_s: f64,
) -> serde_json::Value {
    serde_json::json!({
        "estimate_nats": report.estimate_nats,
        "stderr": report.stderr,
        "n_eval": report.n_eval,
        "d_hat_y": report.d_hat_y,
        "d_hat_yx": report.d_hat_yx,
        "baseline_nats": baseline.map(|(v, _)| v),
        "baseline_method": baseline.map(|(_, m)| m),
        "channel": config.channel,
        "config": config.echo(),
        "seed": config.seed,
        "runtime_s": runtime_s,
    })
}

fn save_params_if_asked(args: &TrainArgs, output: &TrainOutput) -> Result<(), Error> {
    let Some(path) = &args.save_params else {
        return Ok(());
    };
    let mut nets: Vec<&dyn Network> = Vec::new();
    match &output.estimator {
        TrainedEstimator::Dine { net_y, net_xy, .. } => {
            nets.push(net_y);
            nets.push(net_xy);
        }
        TrainedEstimator::Mine { critic } => nets.push(critic),
    }
    if let Some(ndt) = &output.ndt {
        nets.push(ndt);
    }
    save_checkpoint(path, &nets)
}

fn run_estimate(args: EstimateArgs) -> Result<(), Error> {
    let mut cfg = args.train.resolve(Mode::Estimate)?;
    if let Some(path) = &args.dataset {
        cfg.dataset = Some(path.display().to_string());
    }
    cfg.validate()?;
    let dataset_path = cfg.dataset.clone().expect("validated");
    let dataset = ingest_csv(Path::new(&dataset_path))?;
    let started = Instant::now();
    let abort_path = args.train.out.as_ref().map(|d| {
        let _ = std::fs::create_dir_all(d);
        d.join("abort_checkpoint.json")
    });
    let output = train_dine(&cfg, &dataset, abort_path.as_deref())?;
    let json = write_outputs(
        args.train.out.as_deref(),
        &cfg,
        &output,
        started.elapsed().as_secs_f64(),
    )?;
    save_params_if_asked(&args.train, &output)?;
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(())
}

fn run_capacity(args: CapacityArgs) -> Result<(), Error> {
    let mut cfg = args.train.resolve(Mode::Capacity)?;
    if let Some(channel) = args.channel.build_channel()? {
        cfg.channel = Some(channel);
    }
    if args.channel.feedback {
        cfg.feedback = true;
    }
    if let Some(p) = args.channel.power {
        cfg.constraint.kind = ConstraintKind::AveragePower;
        cfg.constraint.power = p;
    }
    if let Some(a) = args.channel.amplitude {
        cfg.constraint.kind = ConstraintKind::PeakPower;
        cfg.constraint.amplitude = a;
    }
    cfg.validate()?;
    let channel = cfg.channel.clone().expect("validated");
    let started = Instant::now();
    let abort_path = args.train.out.as_ref().map(|d| {
        let _ = std::fs::create_dir_all(d);
        d.join("abort_checkpoint.json")
    });
    let output = train_dine_ndt(&cfg, &channel, abort_path.as_deref())?;
    let json = write_outputs(
        args.train.out.as_deref(),
        &cfg,
        &output,
        started.elapsed().as_secs_f64(),
    )?;
    save_params_if_asked(&args.train, &output)?;
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(())
}

fn run_baseline(args: BaselineArgs) -> Result<(), Error> {
    let Some(channel) = args.channel.build_channel()? else {
        return Err(Error::Config("baseline needs --channel".into()));
    };
    let query = CapacityQuery {
        channel: channel.clone(),
        power: args.channel.power,
        amplitude: args.channel.amplitude,
        feedback: args.channel.feedback,
    };
    let (capacity, method) = query.evaluate()?;
    let json = serde_json::json!({
        "channel": channel,
        "params": {
            "power": args.channel.power,
            "amplitude": args.channel.amplitude,
            "feedback": args.channel.feedback,
        },
        "capacity_nats": capacity,
        "method": method,
    });
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<(), Error> {
    let Some(channel) = args.channel.build_channel()? else {
        return Err(Error::Config("simulate needs --channel".into()));
    };
    if args.input_variance < 0.0 {
        return Err(Error::Config("input_variance must be nonnegative".into()));
    }
    let dataset = gaussian_input_dataset(
        &channel,
        args.input_variance,
        args.steps,
        args.trajectories,
        args.seed,
    )?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("trajectories.csv");
    write_csv(&path, &dataset)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let checks = gradcheck::battery(args.seed);
    let mut worst: f64 = 0.0;
    let mut all_pass = true;
    for c in &checks {
        println!(
            "{:<28} max rel-error {:.3e} (threshold {:.0e}) {}",
            c.name,
            c.max_rel_error,
            c.threshold,
            if c.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(c.max_rel_error);
        all_pass &= c.passed();
    }
    println!("max rel-error {worst:.3e}");
    if all_pass {
        Ok(())
    } else {
        Err(Error::Numerical {
            step: 0,
            message: "gradient check exceeded its threshold".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Capacity(args) => run_capacity(args),
        Command::Baseline(args) => run_baseline(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
