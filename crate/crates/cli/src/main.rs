//! `atrl`: data generation, spectral analysis, training, experiment recipes,
//! invariant suites and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use atrl::config::{Experiment, ExperimentConfig, ModelSpec, OutputPaths};
use atrl::datasets::{export_csv, load_dataset, save_dataset};
use atrl::datasets::{
    gen_gravity, gen_linear_functional, gen_target_form_dataset, Dataset, FilterKind, GravityConfig,
    LinearFunctionalConfig,
};
use atrl::pod::{fit_decay_exponent, pod, QuadratureGrid};
use atrl::report::{emit_report, ReportKind};
use atrl::target::{complexity_measures, Kernel, TargetSpec};
use atrl::training::experiments::{run_gravity, run_temporal_order, sweep_mh, RunOutput};
use atrl::training::records::{append_records, append_timings, config_hash, read_records, write_summary_csv, ExperimentRecord};
use atrl::training::{train, Rnn, TrainOutcome};
use atrl::transformer::Transformer;

#[derive(Parser)]
#[command(name = "atrl", version, about = "Simplified transformer laboratory")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Gravity,
    /// Convolution with the exponential filter.
    LinearExp,
    /// Convolution with a uniform random filter.
    LinearRandom,
    /// Target-form data from `--target`.
    Target,
}

#[derive(clap::Args, Default)]
struct Outputs {
    /// JSON-lines record store (appended).
    #[arg(long)]
    records: Option<PathBuf>,
    /// JSON-lines wall-time store (appended).
    #[arg(long)]
    timings: Option<PathBuf>,
    /// Summary CSV of this run's records.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distance clamp for gravity data.
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        /// Target spec JSON for `--kind target`.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also export the samples as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Spectral decomposition of a target's attention kernel.
    Pod {
        /// Target spec JSON (or a bare kernel JSON).
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 256)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of singular values to print.
        #[arg(long, default_value_t = 16)]
        show: usize,
        /// Decay exponent used for the complexity measures.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train one model as described by a `train` config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: Outputs,
        /// Transformer checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Head-width sweep on spectral targets.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Outputs,
    },
    /// Temporal-order comparison of the recurrent and attention models.
    Table1 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Outputs,
    },
    /// Attention-graph recovery on gravity data.
    Gravity {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Outputs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the invariant suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit CSV, SVG and table files from a record store.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        kind: ReportKind,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<atrl::Error> for Failure {
    fn from(e: atrl::Error) -> Self {
        match e {
            atrl::Error::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::from(atrl::Error::from(e))
            }
        }
    )*};
}

runtime_from!(
    atrl::tensor::TensorError,
    atrl::transformer::ModelError,
    atrl::pod::PodError,
    atrl::target::TargetError,
    atrl::datasets::DataError,
    atrl::training::TrainError,
    atrl::report::ReportError,
    std::io::Error
);

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if cli.verbose {
        env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{}", json!({"error": "usage", "message": msg}));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("{}", json!({"error": "runtime", "message": msg}));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData {
            kind,
            tau,
            count,
            seed,
            eps,
            target,
            out,
            csv,
        } => gen_data(kind, tau, count, seed, eps, target.as_deref(), &out, csv.as_deref()),
        Command::Pod {
            target,
            grid,
            out,
            show,
            alpha,
        } => pod_cmd(&target, grid, out.as_deref(), show, alpha),
        Command::Train { config, out, checkpoint } => train_cmd(&config, out, checkpoint),
        Command::Sweep { config, out } => {
            let (cfg, paths) = load_or_default(config.as_deref(), "sweep", |e| match e {
                Experiment::Sweep(c) => Some(c),
                _ => None,
            })?;
            let output = sweep_mh(&cfg)?;
            store(&output, &merge(paths, out))
        }
        Command::Table1 { config, out } => {
            let (cfg, paths) = load_or_default(config.as_deref(), "table1", |e| match e {
                Experiment::Table1(c) => Some(c),
                _ => None,
            })?;
            let output = run_temporal_order(&cfg)?;
            for r in output.records.iter().filter(|r| r.metric == "test_mse") {
                println!(
                    "{:<12} {:<14} {:<9} {:.3e}",
                    r.get("model").unwrap_or(""),
                    r.get("order").unwrap_or(""),
                    r.get("variant").unwrap_or(""),
                    r.value
                );
            }
            store(&output, &merge(paths, out))
        }
        Command::Gravity { config, out, checkpoint } => {
            let (cfg, paths) = load_or_default(config.as_deref(), "gravity", |e| match e {
                Experiment::Gravity(c) => Some(c),
                _ => None,
            })?;
            let (output, model) = run_gravity(&cfg)?;
            for r in output.records.iter().filter(|r| r.metric == "agreement") {
                println!("agreement {:<9} {:.4}", r.get("model").unwrap_or(""), r.value);
            }
            let paths = merge(paths, out);
            if let Some(p) = checkpoint.or(paths.checkpoint.clone()) {
                model.save(p)?;
            }
            store(&output, &paths)
        }
        Command::Verify { seed } => {
            let mut all_ok = true;
            for s in atrl::verify::run_all(seed) {
                all_ok &= s.passed;
                println!(
                    "{} {:<22} checks={:<4} worst={:.3e} tol={:.1e} {}",
                    if s.passed { "PASS" } else { "FAIL" },
                    s.name,
                    s.checks,
                    s.worst,
                    s.tolerance,
                    s.detail
                );
            }
            if all_ok {
                Ok(())
            } else {
                Err(Failure::Runtime("invariant suites failed".into()))
            }
        }
        Command::Report { records, kind, out } => {
            let recs = read_records(&records)?;
            for p in emit_report(&recs, kind, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    kind: DataKind,
    tau: Option<usize>,
    count: usize,
    seed: u64,
    eps: f64,
    target: Option<&Path>,
    out: &Path,
    csv: Option<&Path>,
) -> CliResult {
    let data = match kind {
        DataKind::Gravity => gen_gravity(&GravityConfig {
            tau: tau.unwrap_or(5),
            count,
            seed,
            eps,
            causal: false,
        })?,
        DataKind::LinearExp | DataKind::LinearRandom => gen_linear_functional(&LinearFunctionalConfig {
            kind: if matches!(kind, DataKind::LinearExp) {
                FilterKind::Exponential
            } else {
                FilterKind::Random
            },
            tau: tau.unwrap_or(32),
            count,
            seed,
        })?,
        DataKind::Target => {
            let path = target.ok_or_else(|| Failure::Usage("--kind target needs --target".into()))?;
            let mut spec: TargetSpec = read_json(path)?;
            if let Some(t) = tau {
                spec.tau = t;
            }
            gen_target_form_dataset(&spec, count, seed)?
        }
    };
    save_dataset(&data, out)?;
    if let Some(p) = csv {
        let file = std::fs::File::create(p)?;
        export_csv(&data, std::io::BufWriter::new(file))?;
    }
    println!("wrote {} samples to {}", data.count(), out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn pod_cmd(target: &Path, n: usize, out: Option<&Path>, show: usize, alpha: Option<f64>) -> CliResult {
    let text = std::fs::read_to_string(target).map_err(|e| Failure::Usage(format!("{}: {e}", target.display())))?;
    let (kernel, spec) = match serde_json::from_str::<TargetSpec>(&text) {
        Ok(spec) => {
            spec.validate()?;
            if spec.d != 1 {
                return Err(Failure::Usage("pod needs a target with d = 1".into()));
            }
            (spec.g.clone(), Some(spec))
        }
        Err(_) => (
            serde_json::from_str::<Kernel>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", target.display())))?,
            None,
        ),
    };
    let grid = QuadratureGrid::unit(n)?;
    let fact = pod(|u, v| kernel.eval(&[u], &[v]), &grid)?;
    for (k, s) in fact.sigma.iter().take(show).enumerate() {
        println!("sigma[{}] = {:.9e}", k + 1, s);
    }
    match fit_decay_exponent(&fact.sigma) {
        Ok(fit) => println!("decay fit: c = {:.6}, alpha = {:.6}, residual = {:.3e}", fit.c, fit.alpha, fit.residual),
        Err(e) => println!("decay fit: {e}"),
    }
    if let (Some(spec), Some(alpha)) = (spec, alpha) {
        let c = complexity_measures(&spec, alpha)?;
        println!("C0 = {:.6e}, C1 = {:.6e}", c.c0, c.c1);
    }
    if let Some(p) = out {
        fact.save(p)?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_or_default<T: Default>(
    path: Option<&Path>,
    kind: &str,
    pick: impl FnOnce(Experiment) -> Option<T>,
) -> Result<(T, OutputPaths), Failure> {
    let Some(path) = path else {
        return Ok((T::default(), OutputPaths::default()));
    };
    let cfg = load_config(path)?;
    let found = cfg.experiment.kind();
    match pick(cfg.experiment) {
        Some(c) => Ok((c, cfg.output)),
        None => Err(Failure::Usage(format!("config describes `{found}`, expected `{kind}`"))),
    }
}

fn merge(mut base: OutputPaths, flags: Outputs) -> OutputPaths {
    base.records = flags.records.or(base.records);
    base.timings = flags.timings.or(base.timings);
    base.summary_csv = flags.summary.or(base.summary_csv);
    base
}

fn store(out: &RunOutput, paths: &OutputPaths) -> CliResult {
    if let Some(p) = &paths.records {
        append_records(p, &out.records)?;
    }
    if let Some(p) = &paths.timings {
        append_timings(p, &out.timings)?;
    }
    if let Some(p) = &paths.summary_csv {
        write_summary_csv(p, &out.records)?;
    }
    if paths.records.is_none() {
        for r in out.records.iter().filter(|r| !r.metric.ends_with("_graph")) {
            println!("{}", serde_json::to_string(r).expect("record serializes"));
        }
    }
    Ok(())
}

fn train_cmd(config: &Path, flags: Outputs, checkpoint: Option<PathBuf>) -> CliResult {
    let cfg = load_config(config)?;
    let hash = config_hash(&cfg.experiment)?;
    let Experiment::Train(job) = cfg.experiment else {
        return Err(Failure::Usage(format!("config describes `{}`, expected `train`", cfg.experiment.kind())));
    };
    let paths = merge(cfg.output, flags);
    let train_set = load_dataset(&job.train_data)?;
    let test_set: Option<Dataset> = job.test_data.as_ref().map(load_dataset).transpose()?;
    let start = std::time::Instant::now();
    let outcome: TrainOutcome = match &job.model {
        ModelSpec::Transformer { budget, options } => {
            let mut m = Transformer::new(*budget, options.clone(), job.model_seed)?;
            let o = train(&mut m, &train_set, test_set.as_ref(), &job.train)?;
            if let Some(p) = checkpoint.or(paths.checkpoint.clone()) {
                m.save(p)?;
            }
            o
        }
        ModelSpec::Rnn { config } => {
            if checkpoint.is_some() || paths.checkpoint.is_some() {
                return Err(Failure::Usage("checkpoints are written for transformer models only".into()));
            }
            let mut m = Rnn::new(config.clone(), job.model_seed)?;
            train(&mut m, &train_set, test_set.as_ref(), &job.train)?
        }
    };
    for h in &outcome.history {
        match h.test_mse {
            Some(t) => println!("epoch {:>6} train {:.6e} test {:.6e}", h.epoch, h.train_mse, t),
            None => println!("epoch {:>6} train {:.6e}", h.epoch, h.train_mse),
        }
    }
    let seed = Some(job.train.seed);
    let last = outcome.last();
    let mut records = vec![
        ExperimentRecord::new("train", &hash, seed, "train_mse", last.train_mse),
        ExperimentRecord::new("train", &hash, seed, "epochs", outcome.epochs_run as f64),
    ];
    if let Some(t) = last.test_mse {
        records.push(ExperimentRecord::new("train", &hash, seed, "test_mse", t));
    }
    let timings = vec![atrl::training::records::TimingRecord {
        experiment: "train".into(),
        config_hash: hash,
        seed,
        labels: Default::default(),
        wall_seconds: start.elapsed().as_secs_f64(),
    }];
    let output = RunOutput { records, timings };
    if paths.records.is_some() || paths.timings.is_some() || paths.summary_csv.is_some() {
        store(&output, &paths)?;
    }
    Ok(())
}
