//! `eduloop`: closed-loop simulation, calibration, replay, metrics and the
//! network service.

mod metrics;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use eduloop_core::pipeline::{calibrate, EngineConfig, Simulation, SimulationReport};
use eduloop_core::session::{load_lesson, transitions_to_jsonl, Lesson, Policy};
use eduloop_core::synthgen::{MentalState, Timeline};
use eduloop_net::store::Store;
use eduloop_net::{ServeConfig, Service};

#[derive(Parser)]
#[command(name = "eduloop", version, about = "EEG-driven adaptive lesson control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a lesson against the synthetic learner.
    Simulate(SimulateArgs),
    /// Train the classifier on a calibration recording and derive a policy.
    Calibrate(CalibrateArgs),
    /// Re-derive a stored session's event log from its rows and commands.
    Replay(SessionArgs),
    /// Start the HTTP control plane and the TCP stream plane.
    Serve(ServeArgs),
    /// Summarize a stored session.
    Metrics(SessionArgs),
}

#[derive(Args)]
struct Common {
    /// Engine config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learner seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    lesson: PathBuf,
    /// Mental-state timeline (JSON); all CLEAR when omitted.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Policy JSON as written by `calibrate`; calibrates when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Directory for `events.jsonl` and `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hard stop in simulated seconds.
    #[arg(long)]
    max_duration: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Where to write the policy; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SessionArgs {
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    session: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// SSP1 stream listener; the HTTP port plus one when omitted.
    #[arg(long)]
    stream_listen: Option<SocketAddr>,
    /// Lesson manifests to load into the store at startup.
    #[arg(long = "lesson")]
    lessons: Vec<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Replay(a) => replay(a),
        Command::Serve(a) => serve(a),
        Command::Metrics(a) => metrics_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        None => Ok(EngineConfig::default()),
        Some(p) => EngineConfig::from_json(&read(p, "config")?).with_context(|| format!("in config {}", p.display())),
    }
}

fn load_lesson_file(path: &Path) -> Result<Lesson> {
    load_lesson(&read(path, "lesson")?).with_context(|| format!("in lesson {}", path.display()))
}

fn engine_err(e: eduloop_core::Error) -> anyhow::Error {
    anyhow!("[{}] {e}", e.module())
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(seed) = a.common.seed {
        cfg = cfg.with_seed(seed);
    }
    let lesson = load_lesson_file(&a.lesson)?;
    let timeline = match &a.timeline {
        Some(p) => Timeline::from_json(&read(p, "timeline")?).with_context(|| format!("in timeline {}", p.display()))?,
        None => Timeline::constant(MentalState::clear()),
    };
    let seed = cfg.generator.seed;
    tracing::info!(seed, "calibrating");
    let cal = calibrate(&cfg).map_err(engine_err)?;
    let policy: Policy = match &a.policy {
        Some(p) => serde_json::from_str(&read(p, "policy")?).with_context(|| format!("in policy {}", p.display()))?,
        None => cal.calibration.policy.clone(),
    };
    policy.validate().map_err(|e| anyhow!("[session] {e}"))?;
    let mut sim = Simulation::new(&cfg, &cal.model, &policy, &lesson, &timeline, seed);
    sim.max_duration_s = a.max_duration;
    let out = sim.run().map_err(engine_err)?;

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("events.jsonl"), transitions_to_jsonl(&out.log))?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    }
    if a.common.json {
        print_json(&out.report)?;
    } else {
        print_report(&out.report, &policy);
    }
    Ok(if out.report.lesson_completed {
        ExitCode::SUCCESS
    } else {
        eprintln!("lesson did not complete within the simulated time limit");
        ExitCode::from(2)
    })
}

fn print_report(r: &SimulationReport, p: &Policy) {
    println!("seed {}  theta_high {:.3e}  theta_low {:.3e}  dwell {}", r.seed, p.theta_high, p.theta_low, p.dwell_epochs);
    println!("simulated {:.1} s in {} epochs ({} with artifacts), {:.0}x real time", r.simulated_s, r.epochs, r.artifact_epochs, r.real_time_factor);
    for l in &r.latencies {
        match l.latency_s {
            Some(s) => println!("confusion onset at {:.1} s detected after {s:.2} s", l.onset_s),
            None => println!("confusion onset at {:.1} s missed", l.onset_s),
        }
    }
    println!(
        "pauses {}  false pauses {}  advisories {}  switches {}  instructor flags {}",
        r.pauses, r.false_pauses, r.advisories_shown, r.switches, r.instructor_flags
    );
    println!("segments completed {}  lesson completed {}", r.segments_completed, r.lesson_completed);
}

#[derive(Serialize)]
struct CalibrationSummary<'a> {
    seed: u64,
    policy: &'a Policy,
    degenerate: bool,
    n_baseline: usize,
    n_training: usize,
    n_skipped: usize,
    ridge: f64,
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(seed) = a.common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = calibrate(&cfg).map_err(engine_err)?;
    let policy = &out.calibration.policy;
    if out.calibration.degenerate {
        tracing::warn!("baseline was degenerate; default thresholds kept");
    }
    let text = serde_json::to_string_pretty(policy)?;
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("cannot write {}", p.display()))?,
        None if !a.common.json => println!("{text}"),
        None => {}
    }
    if a.common.json {
        print_json(&CalibrationSummary {
            seed: cfg.generator.seed,
            policy,
            degenerate: out.calibration.degenerate,
            n_baseline: out.calibration.n_baseline,
            n_training: out.n_training,
            n_skipped: out.n_skipped,
            ridge: out.model.ridge,
        })?;
    }
    Ok(ExitCode::SUCCESS)
}

fn open_store(dir: &Path) -> Result<Store> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    Ok(Store::open(dir)?)
}

#[derive(Serialize)]
struct ReplaySummary {
    session: String,
    transitions: usize,
    identical: bool,
}

fn replay(a: SessionArgs) -> Result<ExitCode> {
    let store = open_store(&a.data_dir)?;
    let derived = store.replay(&a.session)?;
    let stored = store.transitions(&a.session)?;
    let identical = transitions_to_jsonl(&derived) == store.events_jsonl(&a.session)?;
    if a.json {
        print_json(&ReplaySummary {
            session: a.session.clone(),
            transitions: derived.len(),
            identical,
        })?;
    } else {
        print!("{}", transitions_to_jsonl(&derived));
    }
    if !identical {
        eprintln!(
            "replay diverges from the stored log ({} derived, {} stored transitions)",
            derived.len(),
            stored.len()
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn metrics_cmd(a: SessionArgs) -> Result<ExitCode> {
    let store = open_store(&a.data_dir)?;
    let m = metrics::summarize(&store, &a.session)?;
    if a.json {
        print_json(&m)?;
    } else {
        print!("{m}");
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let engine = load_config(a.config.as_deref())?;
    fs::create_dir_all(&a.data_dir).with_context(|| format!("cannot create {}", a.data_dir.display()))?;
    let store = Store::open(&a.data_dir)?;
    for path in &a.lessons {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("lesson path {} has no usable file name", path.display()))?;
        store
            .put_lesson(id, &read(path, "lesson")?)
            .with_context(|| format!("in lesson {}", path.display()))?;
    }
    let service = Service::new(
        store,
        ServeConfig {
            engine,
            ..ServeConfig::default()
        },
    )?;
    let stream_addr = a
        .stream_listen
        .unwrap_or_else(|| SocketAddr::new(a.listen.ip(), a.listen.port().wrapping_add(1)));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let http = tokio::net::TcpListener::bind(a.listen)
            .await
            .with_context(|| format!("cannot listen on {}", a.listen))?;
        let stream = tokio::net::TcpListener::bind(stream_addr)
            .await
            .with_context(|| format!("cannot listen on {stream_addr}"))?;
        tracing::info!(http = %http.local_addr()?, stream = %stream.local_addr()?, data = %a.data_dir.display(), "serving");
        eduloop_net::serve(service.clone(), http, stream).await?;
        anyhow::Ok(())
    })?;
    service.shutdown();
    Ok(ExitCode::SUCCESS)
}
