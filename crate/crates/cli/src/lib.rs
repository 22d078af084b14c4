//! Command-line driver: train, evaluate, inspect unrolled graphs, count
//! parameters, sweep readout times and run the dynamics demo.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration,
//! 3 runtime failure. Diagnostics go to stderr, results to stdout or the
//! output directory.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use msrnn::config::{load_config, serialize_config, Experiment};
use msrnn::dynamics::{classify, power_series_solve, LinearOperator, Schedule, SystemDescriptor};
use msrnn::graph::{PresetOptions, TimeSet};
use msrnn::params::{load_checkpoint, save_checkpoint};
use msrnn::train::{evaluate_at, load_cifar10, train, Cifar10, MetricsWriter, TrainConfig};
use msrnn::unroll::{param_count, unroll_with, wall_clock_estimate};
use msrnn::Error;
use nalgebra::DVector;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Channel width of the first state under `--desk-scale`.
pub const DESK_CHANNELS: usize = 8;

#[derive(Parser, Debug)]
#[command(name = "msrnn", version, about = "Multi-state recurrent network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics, a checkpoint and run metadata.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint at one or more readout times.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated readout times to evaluate at.
        #[arg(long, value_delimiter = ',')]
        t_list: Vec<usize>,
    },
    /// Print a summary, or with --dump the full node list, of the unrolled graph.
    Unroll {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dump: bool,
    },
    /// Print the number of learnable parameters reached by the readout.
    Params {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train and evaluate once per readout time; emits t,params,test_error.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        t_list: Vec<usize>,
    },
    /// Classify a linear residual system and trace its power-series solve.
    Dynamics {
        /// Operator dimension.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Spectral norm of the random operator K'.
        #[arg(long, default_value_t = 0.9)]
        norm: f64,
        /// Symmetric operators have spectral radius equal to the norm; general
        /// ones may converge above norm 1.
        #[arg(long, value_enum, default_value_t = OperatorKind::Symmetric)]
        operator: OperatorKind,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = InputMode::Constant)]
        input: InputMode,
        #[arg(long, value_enum, default_value_t = WeightMode::Shared)]
        weights: WeightMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OperatorKind {
    Symmetric,
    General,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InputMode {
    Delta,
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightMode {
    Shared,
    PerT,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Experiment document (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named architecture.
    #[arg(long)]
    preset: Option<String>,
    /// Readout time.
    #[arg(long)]
    t: Option<usize>,
    /// Channels of the first state (others scale along).
    #[arg(long)]
    channels: Option<usize>,
    /// Independent transition weights at every t.
    #[arg(long)]
    time_unshared: bool,
    /// Shrink widths, data subsets and epochs; recorded in run metadata.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, env = "CIFAR10_DIR")]
    data: Option<PathBuf>,
    /// Output directory for metrics, checkpoints and metadata.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Validation(_)
            | Error::Parse { .. }
            | Error::UnknownPreset(_)
            | Error::UnreachableReadout { .. }
            | Error::Config(_) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_RUNTIME, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            if e.use_stderr() {
                let _ = e.print();
            } else {
                let _ = write!(stdout, "{e}");
            }
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Train { model, run } => cmd_train(&model, &run, out),
        Command::Eval { model, run, t_list } => cmd_eval(&model, &run, &t_list, out),
        Command::Unroll { model, dump } => cmd_unroll(&model, dump, out),
        Command::Params { model } => cmd_params(&model, out),
        Command::Sweep { model, run, t_list } => cmd_sweep(&model, &run, &t_list, out),
        Command::Dynamics { dim, norm, operator, tol, input, weights, seed } => {
            if dim == 0 || !(norm >= 0.0) || !(tol > 0.0) {
                return Err(usage("--dim must be positive, --norm non-negative and --tol positive"));
            }
            let k_prime = match operator {
                OperatorKind::Symmetric => LinearOperator::random_symmetric(dim, norm, seed),
                OperatorKind::General => LinearOperator::random(dim, norm, seed),
            };
            cmd_dynamics(k_prime, norm, tol, input, weights, out)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    runtime(format!("{}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| runtime(format!("writing output: {e}")))
}

/// Build the experiment from a preset or config file plus flag overrides.
fn resolve(model: &ModelArgs, run: Option<&RunArgs>) -> CliResult<Experiment> {
    let mut exp = match (&model.config, &model.preset) {
        (Some(path), _) => {
            let mut exp = load_config(path)?;
            if let Some(t) = model.t {
                exp.io = exp.io.with_readout(t);
            }
            if model.channels.is_some() || model.time_unshared {
                return Err(usage("--channels and --time-unshared apply to presets only"));
            }
            exp
        }
        (None, Some(name)) => {
            let opts = PresetOptions {
                readout: model.t,
                base_channels: model.channels.or(model.desk_scale.then_some(DESK_CHANNELS)),
                time_unshared: model.time_unshared,
                ..Default::default()
            };
            Experiment::from_preset(name, &opts, TrainConfig::default())?
        }
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if model.desk_scale {
        let desk = TrainConfig::desk_scale();
        exp.train = TrainConfig {
            epochs: desk.epochs,
            lr_schedule: desk.lr_schedule,
            train_subset: desk.train_subset,
            test_subset: desk.test_subset,
            ..exp.train
        };
    }
    if let Some(run) = run {
        if let Some(e) = run.epochs {
            exp.train = exp.train.with_epochs(e);
        }
        if let Some(b) = run.batch {
            exp.train.batch_size = b;
        }
        if let Some(s) = run.seed {
            exp.train.seed = s;
        }
    }
    let diags = exp.diagnostics();
    if !diags.is_empty() {
        return Err(Error::Validation(diags).into());
    }
    log::info!("resolved config:\n{}", serialize_config(&exp));
    log::info!("seed {} desk_scale {}", exp.train.seed, model.desk_scale);
    Ok(exp)
}

fn horizon(exp: &Experiment) -> usize {
    exp.io.max_readout().expect("validated experiments have readouts")
}

fn load_data(run: &RunArgs) -> CliResult<Cifar10> {
    let dir = run
        .data
        .as_ref()
        .ok_or_else(|| usage("no data directory: pass --data or set CIFAR10_DIR"))?;
    Ok(load_cifar10(dir)?)
}

fn write_metadata(dir: &Path, command: &str, model: &ModelArgs, exp: &Experiment) -> CliResult<()> {
    let config: serde_json::Value =
        serde_json::from_str(&serialize_config(exp)).expect("serialized config is valid JSON");
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "preset": model.preset,
        "config_path": model.config,
        "desk_scale": model.desk_scale,
        "seed": exp.train.seed,
        "model_hash": exp.model_hash(),
        "config": config,
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| io_err(&path, e))
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_train(model: &ModelArgs, run: &RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let exp = resolve(model, Some(run))?;
    let data = load_data(run)?;
    prepare_out(&run.out)?;
    write_metadata(&run.out, "train", model, &exp)?;
    let mut metrics = MetricsWriter::create(&run.out.join("metrics.csv"))?;
    let outcome = train(&exp.graph, &exp.sharing, &exp.io, &exp.train, &data, &mut |m| metrics.write(m))?;
    let ckpt = run.checkpoint.clone().unwrap_or_else(|| run.out.join("checkpoint.bin"));
    save_checkpoint(&ckpt, &outcome.store, &exp.model_hash())?;
    let last = outcome.history.last().expect("at least one epoch");
    emit(
        out,
        &format!(
            "t={} epochs={} train_loss={:.6} test_error={:.6} checkpoint={}\n",
            horizon(&exp),
            last.epoch,
            last.train_loss,
            last.test_error,
            ckpt.display()
        ),
    )
}

fn cmd_eval(model: &ModelArgs, run: &RunArgs, t_list: &[usize], out: &mut dyn Write) -> CliResult<()> {
    let exp = resolve(model, Some(run))?;
    let ckpt = run.checkpoint.as_ref().ok_or_else(|| usage("eval needs --checkpoint"))?;
    let store = load_checkpoint(ckpt, &exp.model_hash())?;
    let data = load_data(run)?;
    let times: Vec<usize> = if t_list.is_empty() { vec![horizon(&exp)] } else { t_list.to_vec() };
    let mut text = String::from("t,test_error\n");
    for t in times {
        let err = evaluate_at(&store, &exp.graph, &exp.sharing, &exp.io, t, &exp.train, &data)?;
        text.push_str(&format!("{t},{err}\n"));
    }
    emit(out, &text)
}

fn cmd_unroll(model: &ModelArgs, dump: bool, out: &mut dyn Write) -> CliResult<()> {
    let exp = resolve(model, None)?;
    let t = horizon(&exp);
    let u = unroll_with(&exp.graph, &exp.sharing, &exp.io, t, exp.train.bn_timing)?;
    if dump {
        return emit(out, &u.dump());
    }
    let (lo, hi) = wall_clock_estimate(t);
    let text = format!(
        "nodes {}\nparam_groups {}\nparams {}\nbn_keys {}\nreadout_times {}\nwall_clock_ms {lo}-{hi}\n",
        u.nodes.len(),
        u.param_groups().len(),
        param_count(&u, &exp.sharing),
        u.bn_keys().len(),
        TimeSet::Only(exp.io.readout_times.clone()),
    );
    emit(out, &text)
}

fn cmd_params(model: &ModelArgs, out: &mut dyn Write) -> CliResult<()> {
    let exp = resolve(model, None)?;
    let u = unroll_with(&exp.graph, &exp.sharing, &exp.io, horizon(&exp), exp.train.bn_timing)?;
    emit(out, &format!("{}\n", param_count(&u, &exp.sharing)))
}

fn cmd_sweep(model: &ModelArgs, run: &RunArgs, t_list: &[usize], out: &mut dyn Write) -> CliResult<()> {
    let base = resolve(model, Some(run))?;
    let data = load_data(run)?;
    prepare_out(&run.out)?;
    write_metadata(&run.out, "sweep", model, &base)?;
    let mut text = String::from("t,params,test_error\n");
    for &t in t_list {
        let exp = Experiment {
            io: base.io.with_readout(t),
            ..base.clone()
        };
        let u = unroll_with(&exp.graph, &exp.sharing, &exp.io, t, exp.train.bn_timing)?;
        let params = param_count(&u, &exp.sharing);
        let mut metrics = MetricsWriter::create(&run.out.join(format!("metrics_t{t}.csv")))?;
        let outcome = train(&exp.graph, &exp.sharing, &exp.io, &exp.train, &data, &mut |m| metrics.write(m))?;
        let err = outcome.history.last().expect("at least one epoch").test_error;
        log::info!("sweep t={t}: params {params} test_error {err:.4}");
        text.push_str(&format!("{t},{params},{err}\n"));
    }
    let csv = run.out.join("sweep.csv");
    fs::write(&csv, &text).map_err(|e| io_err(&csv, e))?;
    emit(out, &text)
}

fn cmd_dynamics(
    k_prime: LinearOperator,
    norm: f64,
    tol: f64,
    input: InputMode,
    weights: WeightMode,
    out: &mut dyn Write,
) -> CliResult<()> {
    let dim = k_prime.dim();
    let x = DVector::from_element(dim, 1.0 / (dim as f64).sqrt());
    let flat: Vec<f64> = k_prime.matrix().iter().copied().collect();
    let descriptor = SystemDescriptor {
        input: match input {
            InputMode::Delta => Schedule::Delta(x.iter().copied().collect()),
            InputMode::Constant => Schedule::Constant(x.iter().copied().collect()),
        },
        weights: match weights {
            WeightMode::Shared => Schedule::Constant(flat),
            WeightMode::PerT => Schedule::Explicit(vec![flat.clone(), flat.iter().map(|w| -w).collect()]),
        },
    };
    let c = classify(&descriptor);
    let sol = power_series_solve(&k_prime, &x, tol)?;
    let mut text = format!(
        "# homogeneous={} time_invariant={}\n# spectral_norm={norm} spectral_radius~{:.6}\n",
        c.homogeneous,
        c.time_invariant,
        k_prime.spectral_radius(100)
    );
    text.push_str("term,residual_norm\n");
    for (k, r) in sol.term_norms.iter().enumerate().skip(1) {
        text.push_str(&format!("{k},{r:e}\n"));
    }
    text.push_str(&format!("# converged={} terms_used={}\n", sol.converged, sol.terms_used));
    emit(out, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (u8, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("msrnn").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_capture(&[]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["params"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["params", "--preset", "a", "--config", "b"]).0, EXIT_USAGE);
    }

    #[test]
    fn degenerate_dynamics_arguments_are_usage_errors() {
        assert_eq!(run_capture(&["dynamics", "--dim", "0"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["dynamics", "--tol", "0"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_succeeds() {
        let (code, text) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(text.contains("sweep"));
    }

    #[test]
    fn unknown_preset_is_invalid() {
        assert_eq!(run_capture(&["params", "--preset", "nope"]).0, EXIT_INVALID);
    }

    #[test]
    fn unreachable_readout_is_invalid() {
        assert_eq!(run_capture(&["params", "--preset", "resnet_3state", "--t", "6"]).0, EXIT_INVALID);
    }

    #[test]
    fn training_without_data_is_a_usage_error() {
        std::env::remove_var("CIFAR10_DIR");
        assert_eq!(run_capture(&["train", "--preset", "resnet_1state", "--t", "1"]).0, EXIT_USAGE);
    }
}
