use std::fs;
use std::io::Write;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::{info, warn};

use vivo_core::audio::render::{render_offline, TimedAction};
use vivo_core::audio::wav::{read_wav_file, write_wav_file, MonoAudio};
use vivo_core::audio::ChainSpec;
use vivo_core::config::SessionConfigs;
use vivo_core::live::{run_live, AudioSource, LiveOptions, VideoSource};
use vivo_core::session::scenario::{run_scenario, ScenarioAssets};
use vivo_core::session::{export_timeline, format_table, replay, SessionLog, TimelineOptions};
use vivo_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Live,
    Replay,
    Render,
    Scenario,
    Export,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

/// Motion-driven interactive music engine.
#[derive(Debug, Parser)]
#[command(name = "vivo", version)]
struct Cli {
    #[arg(long, value_enum, env = "VIVO_MODE")]
    mode: Mode,

    /// Stochastic score (JSON).
    #[arg(long, env = "VIVO_SCORE")]
    score: Option<PathBuf>,

    /// Mapping routes (JSON).
    #[arg(long, env = "VIVO_MAPPING")]
    mapping: Option<PathBuf>,

    /// Processing chain (JSON).
    #[arg(long, env = "VIVO_CHAIN")]
    chain: Option<PathBuf>,

    /// Engine settings (JSON); defaults apply when omitted.
    #[arg(long, env = "VIVO_ENGINE")]
    engine: Option<PathBuf>,

    /// Raw frame file (live) or mono WAV (render).
    #[arg(long, env = "VIVO_INPUT")]
    input: Option<PathBuf>,

    /// Instrument WAV fed to the audio path in live mode.
    #[arg(long, env = "VIVO_AUDIO_INPUT")]
    audio_input: Option<PathBuf>,

    /// Session log: written by live/scenario, read by replay/render/export.
    #[arg(long, env = "VIVO_LOG")]
    log: Option<PathBuf>,

    #[arg(long, env = "VIVO_SEED")]
    seed: Option<u64>,

    /// Control-plane listen address, e.g. 127.0.0.1:7400.
    #[arg(long, env = "VIVO_LISTEN")]
    listen: Option<String>,

    #[arg(long, env = "VIVO_CAMERA_INDEX")]
    camera_index: Option<u32>,

    #[arg(long, env = "VIVO_AUDIO_DEVICE")]
    audio_device: Option<String>,

    /// Output file: processed WAV (live, render, scenario) or timeline (export).
    #[arg(long, env = "VIVO_OUTPUT")]
    output: Option<PathBuf>,

    /// Timeline format for export.
    #[arg(long, value_enum, default_value = "table", env = "VIVO_FORMAT")]
    format: Format,

    /// Scenario asset directory; the bundled scenario is used when omitted.
    #[arg(long, env = "VIVO_ASSETS")]
    assets: Option<PathBuf>,

    /// Write the scenario's asset files to this directory.
    #[arg(long)]
    export_assets: Option<PathBuf>,

    /// Send parameter commands as OSC to this UDP address.
    #[arg(long, env = "VIVO_OSC")]
    osc: Option<String>,

    /// Live: process inputs as fast as possible instead of in real time.
    #[arg(long)]
    fast: bool,

    /// Live: wait for a TRANSPORT start from the control plane.
    #[arg(long)]
    start_paused: bool,

    /// Live: stop after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
}

enum Failure {
    Usage(String),
    Diverged(String),
    Missing(Vec<PathBuf>),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

fn require<'a>(missing: &mut Vec<&'static str>, flag: &'static str, v: &'a Option<PathBuf>) -> Option<&'a Path> {
    if v.is_none() {
        missing.push(flag);
    }
    v.as_deref()
}

fn check_missing(mode: Mode, missing: Vec<&'static str>) -> Outcome {
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "--mode {} requires {}",
            format!("{mode:?}").to_lowercase(),
            missing.join(", ")
        )))
    }
}

fn require_seed(cli: &Cli) -> Result<u64, Failure> {
    cli.seed.ok_or_else(|| {
        Failure::Usage(format!(
            "--mode {} requires an explicit --seed",
            format!("{:?}", cli.mode).to_lowercase()
        ))
    })
}

/// Loads the configs; flags already found missing are reported with any
/// missing config flags in one message.
fn load_configs(cli: &Cli, mut missing: Vec<&'static str>) -> Result<SessionConfigs, Failure> {
    let score = require(&mut missing, "--score", &cli.score);
    let mapping = require(&mut missing, "--mapping", &cli.mapping);
    let chain = require(&mut missing, "--chain", &cli.chain);
    check_missing(cli.mode, missing)?;
    Ok(SessionConfigs::load(
        cli.engine.as_deref(),
        score.expect("checked"),
        mapping.expect("checked"),
        chain.expect("checked"),
    )?)
}

fn resolve_addr(s: &str) -> Result<SocketAddr, Failure> {
    s.to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| Failure::Usage(format!("cannot resolve address `{s}`")))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e).into()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("writing stdout", e).into())
        }
    }
}

fn live(cli: &Cli) -> Outcome {
    let mut missing = Vec::new();
    let log_path = require(&mut missing, "--log", &cli.log);
    if cli.input.is_none() && cli.camera_index.is_none() {
        missing.push("--input or --camera-index");
    }
    let seed = cli.seed.unwrap_or_else(rand::random);
    let configs = load_configs(cli, missing)?.with_seed(seed);
    info!("seed {seed}");

    let video = match (&cli.input, cli.camera_index) {
        (Some(p), _) => VideoSource::RawFile(p.clone()),
        (None, Some(i)) => VideoSource::Camera(i),
        (None, None) => unreachable!("checked above"),
    };
    let mut opts = LiveOptions::new(configs, video, log_path.expect("checked"));
    opts.audio = match (&cli.audio_input, &cli.audio_device) {
        (Some(p), _) => AudioSource::Wav(p.clone()),
        (None, Some(d)) => AudioSource::Device(d.clone()),
        (None, None) => AudioSource::Silence,
    };
    opts.listen = cli.listen.clone();
    opts.osc_target = cli.osc.as_deref().map(resolve_addr).transpose()?;
    opts.realtime = !cli.fast;
    opts.start_paused = cli.start_paused;
    opts.max_duration_s = cli.duration;
    opts.output_wav = cli.output.clone();
    if let Some(addr) = &cli.listen {
        info!("control plane on {addr}");
    }
    let report = run_live(opts)?;
    println!(
        "seed {seed}: {} ticks, {} triggers, {} audio blocks, {} deadline misses",
        report.ticks, report.triggers, report.audio_blocks, report.deadline_misses
    );
    info!("{}", serde_json::to_string(&report).unwrap_or_default());
    Ok(())
}

fn replay_mode(cli: &Cli) -> Outcome {
    let mut missing = Vec::new();
    let log_path = require(&mut missing, "--log", &cli.log);
    let seed = require_seed(cli)?;
    let configs = load_configs(cli, missing)?.with_seed(seed);
    let log = SessionLog::read_file(log_path.expect("checked"))?;
    if log.is_truncated() {
        warn!("log is truncated; replaying the records it holds");
    }
    let report = replay(&log, &configs)?;
    match &report.divergence {
        None => {
            println!(
                "replay exact: {} ticks, {} derived records match",
                report.ticks, report.compared
            );
            Ok(())
        }
        Some(d) => {
            let show = |r: &Option<vivo_core::record::Record>| {
                r.as_ref()
                    .map(|r| serde_json::to_string(r).unwrap_or_default())
                    .unwrap_or_else(|| "(none)".into())
            };
            Err(Failure::Diverged(format!(
                "replay diverged at derived record {}:\n  logged:   {}\n  replayed: {}",
                d.index,
                show(&d.logged),
                show(&d.replayed)
            )))
        }
    }
}

fn render(cli: &Cli) -> Outcome {
    let mut missing = Vec::new();
    let chain_path = require(&mut missing, "--chain", &cli.chain);
    let input_path = require(&mut missing, "--input", &cli.input);
    let output = require(&mut missing, "--output", &cli.output);
    check_missing(cli.mode, missing)?;
    let seed = require_seed(cli)?;

    let absent: Vec<PathBuf> = [chain_path, input_path, cli.log.as_deref()]
        .into_iter()
        .flatten()
        .filter(|p| !p.exists())
        .map(Path::to_path_buf)
        .collect();
    if !absent.is_empty() {
        return Err(Failure::Missing(absent));
    }

    let chain = ChainSpec::load(chain_path.expect("checked"))?;
    let input = read_wav_file(input_path.expect("checked"))?;
    if input.sample_rate != chain.sample_rate {
        return Err(Error::InvalidInput(format!(
            "input is {} Hz but the chain runs at {} Hz",
            input.sample_rate, chain.sample_rate
        ))
        .into());
    }
    let trace: Vec<TimedAction> = match &cli.log {
        Some(p) => {
            let log = SessionLog::read_file(p)?;
            if log.header.seed != seed {
                return Err(Error::DigestMismatch {
                    name: "seed".into(),
                    logged: log.header.seed.to_string(),
                    actual: seed.to_string(),
                }
                .into());
            }
            let chain_digest = vivo_core::config::digest_of(&chain);
            if log.header.digests.chain != chain_digest {
                return Err(Error::DigestMismatch {
                    name: "chain".into(),
                    logged: log.header.digests.chain.clone(),
                    actual: chain_digest,
                }
                .into());
            }
            log.audio_trace()
        }
        None => Vec::new(),
    };
    let samples = render_offline(&chain, &input.samples, &trace)?;
    let out = output.expect("checked");
    write_wav_file(
        out,
        &MonoAudio {
            sample_rate: chain.sample_rate,
            samples,
        },
    )?;
    println!("rendered {} actions to {}", trace.len(), out.display());
    Ok(())
}

fn scenario(cli: &Cli) -> Outcome {
    let seed = require_seed(cli)?;
    let assets = match &cli.assets {
        Some(dir) => ScenarioAssets::load(dir)?,
        None => ScenarioAssets::bundled()?,
    };
    if let Some(dir) = &cli.export_assets {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        assets.write_to(dir)?;
        info!("scenario assets written to {}", dir.display());
    }
    let run = run_scenario(&assets, seed)?;
    let log_path = cli
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("scenario-{seed}.jsonl")));
    fs::write(&log_path, &run.log_bytes).map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    if let Some(out) = &cli.output {
        write_wav_file(out, &run.output)?;
    }
    let timeline = export_timeline(&run.log, &TimelineOptions::default());
    println!(
        "scenario seed {seed}: noise floor {}, {} triggers, log {}",
        run.noise_floor,
        run.trigger_count(),
        log_path.display()
    );
    print!("{}", format_table(&timeline));
    Ok(())
}

fn export(cli: &Cli) -> Outcome {
    let mut missing = Vec::new();
    let log_path = require(&mut missing, "--log", &cli.log);
    check_missing(cli.mode, missing)?;
    let log = SessionLog::read_file(log_path.expect("checked"))?;
    if log.is_truncated() {
        warn!("log is truncated; exporting the records it holds");
    }
    let timeline = export_timeline(&log, &TimelineOptions::default());
    let text = match cli.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&timeline).map_err(Error::from)?;
            s.push('\n');
            s
        }
        Format::Table => format_table(&timeline),
    };
    write_output(cli.output.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let outcome = match cli.mode {
        Mode::Live => live(&cli),
        Mode::Replay => replay_mode(&cli),
        Mode::Render => render(&cli),
        Mode::Scenario => scenario(&cli),
        Mode::Export => export(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Missing(paths)) => {
            for p in paths {
                eprintln!("error: {}", Error::MissingFile(p));
            }
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Run(Error::Validation(errs))) => {
            eprintln!("error: {} validation problem(s):", errs.0.len());
            for e in errs.iter() {
                eprintln!("  {e}");
            }
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
