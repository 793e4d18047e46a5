mod config;
mod report;

use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use segxal_core::dataset::{export_dataset, Manifest, SyntheticBenchmark};
use segxal_core::io::write_atomic;
use segxal_core::metrics::MetricsReport;
use segxal_core::orchestrator::{read_state, CycleOutcome, DepthVariant, OracleMode, Runner, StopReason, Strategy};
use segxal_core::types::SCHEMA_VERSION;
use segxal_core::Error;
use segxal_service::{router, ServiceConfig};

use config::{CliConfig, ECHO_FILE};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  any other error
  2  output path not writable
  3  depth files missing for some samples
  4  run state written by an incompatible version
  5  run directory missing or without completed cycles
  6  port already in use
  7  human oracle waiting, but no annotation service is reachable";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingDepth(_) => 3,
            Error::Schema { .. } => 4,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "segxal", version, about = "Explainable active learning for semantic segmentation", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Segxal,
    Random,
    Entropy,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Machine,
    Human,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthArg {
    Synthetic,
    MidasFiles,
    Dinov2Files,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the exported directory layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        max_objects: usize,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Run an active-learning experiment, or continue one.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum)]
        oracle: Option<OracleArg>,
        #[arg(long, value_enum)]
        depth: Option<DepthArg>,
        #[arg(long)]
        depth_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue the run in this directory with its echoed configuration.
        #[arg(long, conflicts_with_all = ["config", "strategy", "oracle", "depth", "depth_dir", "seed", "run_dir"])]
        resume: Option<PathBuf>,
        /// Annotation service address polled in human-oracle mode.
        #[arg(long)]
        service: Option<String>,
    },
    /// Per-cycle table of per-class IoU, mIoU and labeled-set size.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = report::Format::Csv)]
        format: report::Format,
    },
    /// Serve the annotation API for a run directory.
    Serve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Browser origin allowed by CORS; any origin when absent.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::GenData {
            out,
            n,
            width,
            height,
            classes,
            seed,
            max_objects,
            split,
        } => gen_data(&out, n, width, height, classes, seed, max_objects, split),
        Command::Run {
            config,
            strategy,
            oracle,
            depth,
            depth_dir,
            seed,
            run_dir,
            resume,
            service,
        } => match resume {
            Some(dir) => resume_run(&dir, service),
            None => (|| {
                let mut cfg = match &config {
                    Some(p) => CliConfig::load(p)?,
                    None => CliConfig::default(),
                };
                apply_flags(&mut cfg, strategy, oracle, depth, depth_dir, seed, run_dir, service);
                new_run(cfg)
            })(),
        },
        Command::Report { run, format } => report::load(&run).and_then(|t| t.render(format)).map(|s| print!("{s}")),
        Command::Serve {
            run,
            port,
            host,
            cors_origin,
        } => serve(&run, &host, port, cors_origin),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn unwritable(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(2, format!("cannot write to {}: {e}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    n: usize,
    width: usize,
    height: usize,
    classes: usize,
    seed: u64,
    max_objects: usize,
    split: Split,
) -> Result<(), CliError> {
    let (n_train, n_val) = match split {
        Split::Train => (n, 0),
        Split::Val => (0, n),
    };
    let bench = SyntheticBenchmark {
        n_train,
        n_val,
        width,
        height,
        num_classes: classes,
        max_objects,
        seed,
    };
    let (train, val) = bench.generate()?;
    let samples = if n_train > 0 { train } else { val };
    let manifest = Manifest {
        schema: SCHEMA_VERSION.into(),
        num_classes: classes,
        width,
        height,
        benchmark: Some(bench),
        ids: samples.iter().map(|s| s.id().to_string()).collect(),
    };
    std::fs::create_dir_all(out).map_err(|e| unwritable(out, e))?;
    export_dataset(out, &samples, &manifest).map_err(|e| match e {
        Error::Io { path, source } => unwritable(&path, source),
        other => other.into(),
    })?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn apply_flags(
    cfg: &mut CliConfig,
    strategy: Option<StrategyArg>,
    oracle: Option<OracleArg>,
    depth: Option<DepthArg>,
    depth_dir: Option<PathBuf>,
    seed: Option<u64>,
    run_dir: Option<PathBuf>,
    service: Option<String>,
) {
    if let Some(s) = strategy {
        cfg.run.strategy = match s {
            StrategyArg::Segxal => Strategy::Segxal,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Entropy => Strategy::EntropyOnly,
        };
    }
    if let Some(o) = oracle {
        cfg.run.oracle = match o {
            OracleArg::Machine => OracleMode::Machine,
            OracleArg::Human => OracleMode::Human,
        };
    }
    if let Some(d) = depth {
        cfg.run.depth = match d {
            DepthArg::Synthetic => DepthVariant::Synthetic,
            DepthArg::MidasFiles => DepthVariant::MidasFiles,
            DepthArg::Dinov2Files => DepthVariant::Dinov2Files,
        };
    }
    if depth_dir.is_some() {
        cfg.run.depth_dir = depth_dir;
    }
    if let Some(s) = seed {
        cfg.run.al.seed = s;
    }
    if run_dir.is_some() {
        cfg.run_dir = run_dir;
    }
    if let Some(s) = service {
        cfg.service_addr = s;
    }
}

fn print_metrics(label: &str, m: &MetricsReport) {
    println!(
        "{label}: mIoU={:.4} labeled={} accepted={}/{}",
        m.miou, m.samples_labeled, m.samples_accepted, m.samples_queried
    );
}

fn stop_name(r: StopReason) -> String {
    serde_json::to_value(r)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn new_run(mut cfg: CliConfig) -> Result<(), CliError> {
    cfg.run.validate()?;
    let dir = cfg.resolve_run_dir();
    if dir.join("state.json").exists() {
        return Err(CliError::new(
            1,
            format!("{} already holds a run; continue it with --resume", dir.display()),
        ));
    }
    std::fs::create_dir_all(&dir).map_err(|e| unwritable(&dir, e))?;
    cfg.run_dir = Some(dir.clone());
    let echo = serde_json::to_vec_pretty(&cfg).expect("config serialises");
    write_atomic(&dir.join(ECHO_FILE), &echo).map_err(|e| unwritable(&dir, e))?;

    let (train, val) = cfg.load_data()?;
    let runner = Runner::new(cfg.run.clone(), train, val, Some(dir.clone()))?;
    println!("run directory: {}", dir.display());
    if let Some(m) = &runner.state.initial_metrics {
        print_metrics("initial", m);
    }
    drive(runner, &cfg)
}

fn resume_run(dir: &Path, service: Option<String>) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::new(5, format!("{}: no such run directory", dir.display())));
    }
    let state = read_state(dir)?;
    if let Some(r) = state.stopped {
        println!("run in {} already finished ({}); nothing to do", dir.display(), stop_name(r));
        return Ok(());
    }
    let mut cfg = CliConfig::load(&dir.join(ECHO_FILE))?;
    if let Some(s) = service {
        cfg.service_addr = s;
    }
    let (train, val) = cfg.load_data()?;
    let runner = Runner::resume(dir, train, val)?;
    println!("resuming {} after cycle {}", dir.display(), runner.state.cycle);
    drive(runner, &cfg)
}

fn service_reachable(addr: &str) -> bool {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map(|a| a.collect()).unwrap_or_default();
    addrs
        .iter()
        .any(|a| TcpStream::connect_timeout(a, Duration::from_secs(1)).is_ok())
}

/// Runs cycles until the loop stops. In human-oracle mode a suspended
/// cycle is polled until its tickets are submitted.
fn drive(mut runner: Runner, cfg: &CliConfig) -> Result<(), CliError> {
    let dir = runner.dir().map(Path::to_path_buf).unwrap_or_default();
    let mut announced = None;
    loop {
        match runner.run_cycle()? {
            CycleOutcome::Completed(m) => {
                announced = None;
                print_metrics(&format!("cycle {}", m.cycle), &m);
            }
            CycleOutcome::Stopped(r) => {
                println!("finished: {}", stop_name(r));
                return Ok(());
            }
            CycleOutcome::Suspended { cycle, waiting } => {
                if !service_reachable(&cfg.service_addr) {
                    let port = cfg.service_addr.rsplit(':').next().unwrap_or("8080");
                    return Err(CliError::new(
                        7,
                        format!(
                            "cycle {cycle} has {waiting} samples waiting for human annotation, but no annotation service \
                             answers at {addr}.\nStart it with `segxal serve --run {d} --port {port}`, then continue \
                             with `segxal run --resume {d}`.",
                            addr = cfg.service_addr,
                            d = dir.display(),
                        ),
                    ));
                }
                if announced != Some((cycle, waiting)) {
                    println!("cycle {cycle}: waiting for {waiting} annotations via http://{}", cfg.service_addr);
                    announced = Some((cycle, waiting));
                }
                std::thread::sleep(Duration::from_millis(cfg.poll_ms));
            }
        }
    }
}

fn serve(run: &Path, host: &str, port: u16, cors_origin: Option<String>) -> Result<(), CliError> {
    if !run.is_dir() {
        return Err(CliError::new(5, format!("{}: no such run directory", run.display())));
    }
    let listener = std::net::TcpListener::bind((host, port)).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => CliError::new(6, format!("port {port} is already in use")),
        _ => CliError::new(1, format!("cannot bind {host}:{port}: {e}")),
    })?;
    listener.set_nonblocking(true).map_err(|e| CliError::new(1, e.to_string()))?;
    let app = router(ServiceConfig {
        cors_origin,
        ..ServiceConfig::new(run)
    });
    println!("serving {} on http://{host}:{port}/api", run.display());
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new(1, e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        segxal_service::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .map_err(|e| CliError::new(1, e.to_string()))
}
