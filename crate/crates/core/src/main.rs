use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use logsae::io::{load_dataset, sha256_file, RunManifest, Table};
use logsae::report::{self, FitSummary};
use logsae::simulation::{
    misspecification_study, run_emse_study, run_mspe_study, zero_proportion_study, SimulationConfig,
};
use logsae::{
    bootstrap_mspe, fit, jackknife_mspe, predict_all, Error, ErrorClass, FitConfig, Result, VarianceMoment,
};

#[derive(Parser, Debug)]
#[command(name = "logsae", version, about = "EB prediction under an area-level log model with noisy covariates")]
struct Cli {
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true, env = "LOGSAE_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate beta and sigma2_nu; writes JSON.
    Fit(DatasetArgs),
    /// Fit, then write per-area EB predictions as CSV.
    Predict(DatasetArgs),
    /// Fit, then write per-area jackknife or bootstrap MSPE as CSV.
    Mspe(MspeArgs),
    /// Run a simulation study; writes CSVs and report.json into a directory.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct FitArgs {
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value = "sampling-only")]
    variance_moment: VarianceMoment,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_iterations: self.max_iter,
            rel_tolerance: self.tol,
            variance_moment: self.variance_moment,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct DatasetArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Jackknife,
    Bootstrap,
}

#[derive(Args, Debug, Clone, Serialize)]
struct MspeArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum Study {
    Emse,
    Mspe,
    Zeros,
    Misspec,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    study: Study,
    /// Number of areas; `zeros` and `misspec` accept a comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    m: Vec<usize>,
    /// Percent of areas with measurement error; list form as for --m.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    k: Vec<u32>,
    /// Measurement-error variance for the affected areas.
    #[arg(long, default_value_t = 2.0)]
    d: f64,
    #[arg(long, default_value_t = 1000)]
    r: usize,
    #[arg(long, default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    d_true: f64,
    #[arg(long, default_value_t = 4.0)]
    d_mis: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
}

struct Outcome {
    seed: Option<u64>,
    input: Option<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn write_table(path: &Path, table: &Table) -> Result<()> {
    write_bytes(path, &table.to_bytes()?)
}

fn cmd_fit(args: &DatasetArgs) -> Result<Outcome> {
    let areas = load_dataset(&args.input)?;
    let config = args.fit.config();
    let fitted = fit(&areas, &config)?;
    write_json(&args.out, &FitSummary::new(&areas, &fitted, config.variance_moment))?;
    Ok(Outcome {
        seed: None,
        input: Some(args.input.clone()),
        outputs: vec![args.out.clone()],
        manifest: manifest_path_for(&args.out),
    })
}

fn cmd_predict(args: &DatasetArgs) -> Result<Outcome> {
    let areas = load_dataset(&args.input)?;
    let fitted = fit(&areas, &args.fit.config())?;
    let preds = predict_all(&areas, &fitted.params)?;
    write_table(&args.out, &report::predictions_table(&areas, &preds))?;
    Ok(Outcome {
        seed: None,
        input: Some(args.input.clone()),
        outputs: vec![args.out.clone()],
        manifest: manifest_path_for(&args.out),
    })
}

fn cmd_mspe(args: &MspeArgs) -> Result<Outcome> {
    let data = &args.data;
    let areas = load_dataset(&data.input)?;
    let config = data.fit.config();
    let fitted = fit(&areas, &config)?;
    let preds = predict_all(&areas, &fitted.params)?;
    let (table, seed) = match args.method {
        Method::Jackknife => (report::jackknife_table(&preds, &jackknife_mspe(&areas, &fitted, &config)?), None),
        Method::Bootstrap => {
            let outcome = bootstrap_mspe(&areas, &fitted, args.b, args.seed, &config)?;
            if outcome.failed > 0 {
                eprintln!(
                    "warning: {} of {} bootstrap replicates failed and were dropped",
                    outcome.failed, outcome.requested
                );
            }
            (report::bootstrap_table(&preds, &outcome), Some(args.seed))
        }
    };
    write_table(&data.out, &table)?;
    Ok(Outcome {
        seed,
        input: Some(data.input.clone()),
        outputs: vec![data.out.clone()],
        manifest: manifest_path_for(&data.out),
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let dir = &args.out_dir;
    fs::create_dir_all(dir)?;
    let base = SimulationConfig {
        r_replications: args.r,
        b_bootstrap: args.b,
        fit: args.fit.config(),
        ..SimulationConfig::standard(args.m[0], args.k[0], args.d, args.seed)
    };
    let mut outputs = Vec::new();
    let mut emit = |name: &str, table: &Table| -> Result<()> {
        let path = dir.join(name);
        write_table(&path, table)?;
        outputs.push(path);
        Ok(())
    };
    let report_path = dir.join("report.json");
    match args.study {
        Study::Emse => {
            let rep = run_emse_study(&base)?;
            emit("emse.csv", &report::emse_table(&rep))?;
            emit("emse_areas.csv", &report::emse_area_table(&rep))?;
            write_json(&report_path, &rep)?;
        }
        Study::Mspe => {
            let rep = run_mspe_study(&base)?;
            emit("mspe.csv", &report::mspe_table(&rep))?;
            emit("mspe_areas.csv", &report::mspe_area_table(&rep))?;
            emit("mspe_draws.csv", &report::mspe_draws_table(&rep))?;
            write_json(&report_path, &rep)?;
        }
        Study::Zeros => {
            let rows = zero_proportion_study(&base, &args.m, &args.k)?;
            emit("zero_proportions.csv", &report::zero_table(&rows))?;
            write_json(&report_path, &rows)?;
        }
        Study::Misspec => {
            let mut rows = Vec::with_capacity(args.m.len() * args.k.len());
            for &m in &args.m {
                for &k in &args.k {
                    let config = SimulationConfig {
                        m,
                        k_percent: k,
                        ..base.clone()
                    };
                    rows.push(misspecification_study(&config, args.d_true, args.d_mis)?);
                }
            }
            emit("misspecification.csv", &report::misspecification_table(&rows))?;
            write_json(&report_path, &rows)?;
        }
    }
    outputs.push(report_path);
    Ok(Outcome {
        seed: Some(args.seed),
        input: None,
        outputs,
        manifest: dir.join("manifest.json"),
    })
}

fn config_echo(command: &Command) -> serde_json::Value {
    let value = match command {
        Command::Fit(a) | Command::Predict(a) => serde_json::to_value(a),
        Command::Mspe(a) => serde_json::to_value(a),
        Command::Simulate(a) => serde_json::to_value(a),
    };
    value.unwrap_or(serde_json::Value::Null)
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Fit(_) => "fit",
        Command::Predict(_) => "predict",
        Command::Mspe(_) => "mspe",
        Command::Simulate(_) => "simulate",
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run(cli: &Cli) -> Result<()> {
    let started = unix_now();
    let clock = Instant::now();
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Mspe(a) => cmd_mspe(a),
        Command::Simulate(a) => cmd_simulate(a),
    }?;
    let input_sha256 = outcome.input.as_deref().map(sha256_file).transpose()?;
    let manifest = RunManifest {
        command: command_name(&cli.command).to_string(),
        config: config_echo(&cli.command),
        seed: outcome.seed,
        library_version: env!("CARGO_PKG_VERSION"),
        input_sha256,
        threads: rayon::current_num_threads(),
        started_unix_seconds: started,
        finished_unix_seconds: unix_now(),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&outcome.manifest, &manifest)
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Simulate(a) = &cli.command {
        if matches!(a.study, Study::Emse | Study::Mspe) && (a.m.len() != 1 || a.k.len() != 1) {
            Cli::command()
                .error(ErrorKind::ArgumentConflict, "--m and --k take a single value for this study")
                .exit();
        }
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let class = err.class();
            let body = serde_json::json!({
                "error_class": class.as_str(),
                "kind": err.kind(),
                "message": err.to_string(),
            });
            eprintln!("{body}");
            ExitCode::from(exit_code(class))
        }
    }
}
