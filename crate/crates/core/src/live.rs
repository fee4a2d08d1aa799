//! Live runtime: video analysis, audio processing, the engine scheduler and
//! the control plane, each in its own thread, joined by bounded channels.
//!
//! Device capture is not built in; file-backed sources are paced against the
//! wall clock in real-time mode, or run as fast as possible otherwise.

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{select, Receiver, Sender};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::audio::render::{action_channel, AudioAction, AudioProcessor};
use crate::audio::wav::{read_wav_file, write_wav_file, MonoAudio};
use crate::audio::ProcessingChain;
use crate::config::SessionConfigs;
use crate::control::protocol::{ErrorCode, Reply, ReplyError, TransportAction};
use crate::control::{execute, ControlServer, Executed, Inbound, MetricsHub, OscEmitter, Outbox, Plan};
use crate::error::{Error, Result};
use crate::motion::{calibrate_noise_floor, LuminanceGrid, MotionAnalyzer, MotionConfig, MotionSample};
use crate::record::{EnvelopeSample, Record};
use crate::session::{LogHeader, Recorder};
use crate::video::RawVideoReader;

pub enum VideoSource {
    RawFile(PathBuf),
    Camera(u32),
    Frames { frames: Vec<LuminanceGrid>, fps: f64 },
}

pub enum AudioSource {
    Wav(PathBuf),
    Device(String),
    Samples(MonoAudio),
    Silence,
}

pub struct LiveOptions {
    pub configs: SessionConfigs,
    pub video: VideoSource,
    pub audio: AudioSource,
    pub log_path: PathBuf,
    pub listen: Option<String>,
    pub osc_target: Option<SocketAddr>,
    /// Pace sources against the wall clock.
    pub realtime: bool,
    /// Wait for a TRANSPORT start before processing anything.
    pub start_paused: bool,
    pub output_wav: Option<PathBuf>,
    /// Stop after this much engine time.
    pub max_duration_s: Option<f64>,
    pub queue_capacity: usize,
    /// Receives the control-plane address once listening.
    pub ready: Option<Sender<SocketAddr>>,
}

impl LiveOptions {
    pub fn new(configs: SessionConfigs, video: VideoSource, log_path: impl Into<PathBuf>) -> Self {
        Self {
            configs,
            video,
            audio: AudioSource::Silence,
            log_path: log_path.into(),
            listen: None,
            osc_target: None,
            realtime: true,
            start_paused: false,
            output_wav: None,
            max_duration_s: None,
            queue_capacity: crate::control::server::DEFAULT_QUEUE_CAPACITY,
            ready: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LiveReport {
    pub ticks: u64,
    pub triggers: u64,
    pub noise_floor: u8,
    pub audio_blocks: u64,
    pub deadline_misses: u64,
    pub max_block_process_us: f64,
    pub mean_block_process_us: f64,
    pub max_block_lateness_us: f64,
    pub dropped_audio_actions: u64,
    pub metrics_published: u64,
    pub subscribers_dropped: u64,
    pub osc_sent: u64,
    pub log_truncated: bool,
}

#[derive(Default)]
struct AudioStats {
    envelope_bits: AtomicU64,
    blocks: AtomicU64,
    misses: AtomicU64,
    max_process_ns: AtomicU64,
    total_process_ns: AtomicU64,
    max_lateness_ns: AtomicU64,
}

impl AudioStats {
    fn envelope(&self) -> f64 {
        f64::from_bits(self.envelope_bits.load(Ordering::Acquire))
    }
}

enum VideoEvent {
    Calibrated(u8),
    Sample(MotionSample),
    Recalibrated(u8),
    End,
}

struct Recalibrate {
    request_id: serde_json::Value,
    outbox: Outbox,
}

struct FrameSource {
    inner: Box<dyn Iterator<Item = Result<LuminanceGrid>> + Send>,
    fps: f64,
}

fn open_video(src: VideoSource) -> Result<FrameSource> {
    match src {
        VideoSource::Camera(i) => Err(Error::Unsupported(format!(
            "camera capture (index {i}) is not available in this build; record to a raw frame file and pass it as input"
        ))),
        VideoSource::RawFile(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
            let reader = RawVideoReader::open(&p)?;
            let fps = reader.header().fps;
            Ok(FrameSource {
                inner: Box::new(reader),
                fps,
            })
        }
        VideoSource::Frames { frames, fps } => Ok(FrameSource {
            inner: Box::new(frames.into_iter().map(Ok)),
            fps,
        }),
    }
}

fn open_audio(src: AudioSource, sample_rate: u32) -> Result<Vec<f32>> {
    let audio = match src {
        AudioSource::Device(name) => {
            return Err(Error::Unsupported(format!(
                "audio device capture (`{name}`) is not available in this build; pass a WAV file instead"
            )))
        }
        AudioSource::Silence => return Ok(Vec::new()),
        AudioSource::Wav(p) => read_wav_file(p)?,
        AudioSource::Samples(a) => a,
    };
    if audio.sample_rate != sample_rate {
        return Err(Error::InvalidInput(format!(
            "audio input is {} Hz but the chain runs at {sample_rate} Hz",
            audio.sample_rate
        )));
    }
    Ok(audio.samples)
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

#[allow(clippy::too_many_arguments)]
fn video_thread(
    mut source: FrameSource,
    motion: MotionConfig,
    calibrate: Option<(usize, f64)>,
    max_noise_floor: u8,
    realtime: bool,
    start: Instant,
    out: Sender<VideoEvent>,
    recal: Receiver<Recalibrate>,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    let mut analyzer = MotionAnalyzer::new(motion)?;
    let (cal_frames, k_cal) = calibrate.unwrap_or((0, 1.0));
    let mut pending: Vec<(Recalibrate, Vec<LuminanceGrid>)> = Vec::new();
    let mut startup: Vec<LuminanceGrid> = Vec::new();
    let mut calibrated = false;
    let mut first_ts = None;
    while !stop.load(Ordering::Relaxed) {
        let Some(frame) = source.inner.next() else { break };
        let frame = frame?;
        let base = *first_ts.get_or_insert(frame.timestamp_us);
        if realtime {
            sleep_until(start + Duration::from_micros(frame.timestamp_us - base));
        }
        if !calibrated && cal_frames > 0 {
            startup.push(frame);
            if startup.len() == cal_frames {
                let eps = calibrate_noise_floor(&startup, k_cal)?;
                calibrated = true;
                analyzer.set_noise_floor(eps);
                // The last calibration frame is the reference for the first sample.
                analyzer.push(startup.pop().expect("non-empty"))?;
                if out.send(VideoEvent::Calibrated(eps)).is_err() {
                    break;
                }
            }
            continue;
        }
        while let Ok(r) = recal.try_recv() {
            pending.push((r, Vec::new()));
        }
        for (_, frames) in &mut pending {
            frames.push(frame.clone());
        }
        let needed = cal_frames.max(crate::motion::MIN_CALIBRATION_FRAMES);
        while pending.first().is_some_and(|(_, f)| f.len() >= needed) {
            let (req, frames) = pending.remove(0);
            let reply = match calibrate_noise_floor(&frames, k_cal) {
                Ok(eps) if eps <= max_noise_floor => {
                    analyzer.set_noise_floor(eps);
                    let _ = out.send(VideoEvent::Recalibrated(eps));
                    Reply::ok(req.request_id, json!({"noise_floor": eps}))
                }
                Ok(eps) => Reply::error(
                    req.request_id,
                    ReplyError::new(
                        ErrorCode::State,
                        format!("scene not still: noise-floor estimate {eps} exceeds {max_noise_floor}"),
                    ),
                ),
                Err(e) => Reply::error(req.request_id, ReplyError::from(e)),
            };
            req.outbox.reply(reply);
        }
        if let Some(sample) = analyzer.push(frame)? {
            if out.send(VideoEvent::Sample(sample)).is_err() {
                break;
            }
        }
    }
    let _ = out.send(VideoEvent::End);
    Ok(())
}

/// The audio "callback": one block per period, never waiting on anything
/// but the clock.
/// Best effort: without the privilege the thread keeps its normal priority.
#[cfg(unix)]
fn promote_to_realtime() {
    use thread_priority::unix::{
        set_thread_priority_and_policy, thread_native_id, RealtimeThreadSchedulePolicy, ThreadSchedulePolicy,
    };
    use thread_priority::{ThreadPriority, ThreadPriorityValue};
    let prio = ThreadPriorityValue::try_from(80u8).expect("valid priority");
    let policy = ThreadSchedulePolicy::Realtime(RealtimeThreadSchedulePolicy::Fifo);
    match set_thread_priority_and_policy(thread_native_id(), ThreadPriority::Crossplatform(prio), policy) {
        Ok(()) => info!("audio thread running with real-time priority"),
        Err(e) => warn!("audio thread keeps normal priority: {e:?}"),
    }
}

#[cfg(not(unix))]
fn promote_to_realtime() {
    use thread_priority::{set_current_thread_priority, ThreadPriority};
    if let Err(e) = set_current_thread_priority(ThreadPriority::Max) {
        warn!("audio thread keeps normal priority: {e:?}");
    }
}

#[allow(clippy::too_many_arguments)]
fn audio_thread(
    mut proc: AudioProcessor,
    input: Vec<f32>,
    block: usize,
    sample_rate: u32,
    realtime: bool,
    start: Instant,
    engine_time_us: Arc<AtomicU64>,
    stats: Arc<AudioStats>,
    stop: Arc<AtomicBool>,
    expected_len: usize,
) -> Vec<f32> {
    let mut output = Vec::with_capacity(expected_len + block);
    let mut in_buf = vec![0.0f32; block];
    let mut out_buf = vec![0.0f32; block];
    let period_ns = block as u128 * 1_000_000_000 / u128::from(sample_rate);
    if realtime {
        promote_to_realtime();
    }
    let mut k: u64 = 0;
    while !stop.load(Ordering::Relaxed) {
        let due_ns = u128::from(k) * period_ns;
        if realtime {
            sleep_until(start + Duration::from_nanos(due_ns as u64));
        } else {
            // Stay one block ahead of the engine and no further.
            let block_start_us = (due_ns / 1000) as u64;
            while block_start_us > engine_time_us.load(Ordering::Acquire) && !stop.load(Ordering::Relaxed) {
                thread::sleep(Duration::from_micros(200));
            }
        }
        let t0 = Instant::now();
        let offset = k as usize * block;
        in_buf.fill(0.0);
        if offset < input.len() {
            let n = block.min(input.len() - offset);
            in_buf[..n].copy_from_slice(&input[offset..offset + n]);
        }
        proc.process_block(&in_buf, &mut out_buf);
        stats
            .envelope_bits
            .store(proc.last_input_envelope().to_bits(), Ordering::Release);
        output.extend_from_slice(&out_buf);
        let t1 = Instant::now();

        let process_ns = (t1 - t0).as_nanos() as u64;
        stats.total_process_ns.fetch_add(process_ns, Ordering::Relaxed);
        stats.max_process_ns.fetch_max(process_ns, Ordering::Relaxed);
        if realtime {
            let deadline = start + Duration::from_nanos((due_ns + period_ns) as u64);
            if t1 > deadline {
                stats.misses.fetch_add(1, Ordering::Relaxed);
            }
            let late = t0.saturating_duration_since(start + Duration::from_nanos(due_ns as u64));
            stats
                .max_lateness_ns
                .fetch_max(late.as_nanos() as u64, Ordering::Relaxed);
        } else if process_ns as u128 > period_ns {
            stats.misses.fetch_add(1, Ordering::Relaxed);
        }
        stats.blocks.fetch_add(1, Ordering::Relaxed);
        k += 1;
    }
    output
}

struct Dispatch<'a> {
    audio: &'a Sender<AudioAction>,
    osc: Option<&'a mut OscEmitter>,
    dropped: u64,
}

impl Dispatch<'_> {
    fn records(&mut self, records: &[Record]) {
        for r in records {
            if let Some(a) = r.audio_action() {
                if self.audio.try_send(a).is_err() {
                    self.dropped += 1;
                }
            }
            if let (Record::ParameterCommand(c), Some(osc)) = (r, self.osc.as_deref_mut()) {
                osc.emit(c);
            }
        }
    }
}

/// Runs a live session to the end of the video source (or the duration
/// limit) and writes the log.
pub fn run_live(opts: LiveOptions) -> Result<LiveReport> {
    let configs = opts.configs.clone();
    configs.validate()?;
    let source = open_video(opts.video)?;
    let input = open_audio(opts.audio, configs.chain.sample_rate)?;
    let fps = source.fps;

    let file = File::create(&opts.log_path).map_err(|e| Error::io(format!("creating {}", opts.log_path.display()), e))?;
    let header = LogHeader::for_session(&configs, fps, &format!("live-{:?}", std::time::SystemTime::now()));
    let mut rec = Recorder::new(&configs, &header, BufWriter::new(file))?;
    info!("live session {} (seed {})", header.session_id, header.seed);

    let hub = MetricsHub::new();
    let (inbound_tx, inbound_rx) = crossbeam_channel::bounded::<Inbound>(opts.queue_capacity);
    let server = match &opts.listen {
        Some(addr) => {
            let s = ControlServer::start(addr.as_str(), inbound_tx.clone(), opts.queue_capacity)?;
            if let Some(ready) = &opts.ready {
                let _ = ready.send(s.local_addr());
            }
            Some(s)
        }
        None => None,
    };
    drop(inbound_tx);
    let mut osc = match opts.osc_target {
        Some(t) => Some(OscEmitter::new(t)?),
        None => None,
    };

    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(AudioStats::default());
    let engine_time = Arc::new(AtomicU64::new(0));
    let (audio_tx, audio_rx) = action_channel(4096);
    let processor = AudioProcessor::new(ProcessingChain::new(&configs.chain)?, audio_rx);
    let (video_tx, video_rx) = crossbeam_channel::bounded::<VideoEvent>(64);
    let (recal_tx, recal_rx) = crossbeam_channel::unbounded::<Recalibrate>();

    let engine_cfg = configs.engine.clone();
    let calibrate = engine_cfg
        .calibrate
        .then_some((engine_cfg.calibration_frames, engine_cfg.k_cal));
    let mut running = !opts.start_paused;
    let mut threads_started = false;
    let mut video_handle = None;
    let mut audio_handle = None;
    let mut pending_source = Some(source);
    let mut pending_processor = Some((processor, input));
    let fs = configs.chain.sample_rate;
    let block = configs.chain.block_size;

    let mut start_threads = |video_handle: &mut Option<thread::JoinHandle<Result<()>>>,
                             audio_handle: &mut Option<thread::JoinHandle<Vec<f32>>>|
     -> Result<()> {
        let start = Instant::now();
        let source = pending_source.take().expect("started once");
        let (proc, input) = pending_processor.take().expect("started once");
        let expected = input.len();
        {
            let (stop, stats, engine_time) = (stop.clone(), stats.clone(), engine_time.clone());
            let realtime = opts.realtime;
            *audio_handle = Some(
                thread::Builder::new()
                    .name("vivo-audio".into())
                    .spawn(move || {
                        audio_thread(proc, input, block, fs, realtime, start, engine_time, stats, stop, expected)
                    })
                    .map_err(|e| Error::io("spawning audio thread", e))?,
            );
        }
        {
            let stop = stop.clone();
            let (motion, max_nf, realtime) = (engine_cfg.motion, engine_cfg.max_noise_floor, opts.realtime);
            let (video_tx, recal_rx) = (video_tx.clone(), recal_rx.clone());
            *video_handle = Some(
                thread::Builder::new()
                    .name("vivo-video".into())
                    .spawn(move || {
                        video_thread(source, motion, calibrate, max_nf, realtime, start, video_tx, recal_rx, stop)
                    })
                    .map_err(|e| Error::io("spawning video thread", e))?,
            );
        }
        Ok(())
    };
    if running {
        start_threads(&mut video_handle, &mut audio_handle)?;
        threads_started = true;
    }

    let mut report = LiveReport::default();
    let mut dispatch = Dispatch {
        audio: &audio_tx,
        osc: osc.as_mut(),
        dropped: 0,
    };
    let max_us = opts.max_duration_s.map(|s| (s * 1e6) as u64);
    let mut first_tick: Option<u64> = None;
    let never = crossbeam_channel::never::<VideoEvent>();
    let session: Result<()> = loop {
        let video = if threads_started { &video_rx } else { &never };
        select! {
            recv(video) -> ev => match ev {
                Ok(VideoEvent::Sample(m)) => {
                    engine_time.store(m.timestamp, Ordering::Release);
                    if !running {
                        continue;
                    }
                    let t0 = *first_tick.get_or_insert(m.timestamp);
                    if max_us.is_some_and(|limit| m.timestamp - t0 >= limit) {
                        break Ok(());
                    }
                    let env = stats.envelope().clamp(0.0, 1.0);
                    let step = rec
                        .envelope(EnvelopeSample { envelope: env, timestamp: m.timestamp })
                        .and_then(|_| rec.motion(m));
                    match step {
                        Ok(derived) => {
                            report.ticks += 1;
                            report.triggers += derived.iter().filter(|r| matches!(r, Record::Trigger(_))).count() as u64;
                            dispatch.records(&derived);
                        }
                        Err(e) => break Err(e),
                    }
                    if let Some(frame) = rec.metrics_due() {
                        hub.publish(&frame);
                    }
                }
                Ok(VideoEvent::Calibrated(eps)) => {
                    report.noise_floor = eps;
                    if let Err(e) = rec.annotate(format!("noise floor calibrated to {eps}")) {
                        break Err(e);
                    }
                }
                Ok(VideoEvent::Recalibrated(eps)) => {
                    report.noise_floor = eps;
                    if let Err(e) = rec.annotate(format!("noise floor recalibrated to {eps}")) {
                        break Err(e);
                    }
                }
                Ok(VideoEvent::End) | Err(_) => break Ok(()),
            },
            recv(inbound_rx) -> req => {
                let Ok(Inbound { message, outbox }) = req else { continue };
                let reply = match execute(&mut rec, &message.command) {
                    Ok(Executed::Applied { records, result }) => {
                        dispatch.records(&records);
                        Some(Reply::ok(message.request_id, result))
                    }
                    Ok(Executed::Deferred(Plan::Subscribe)) => {
                        hub.subscribe(outbox.clone());
                        Some(Reply::ok(message.request_id, json!({"metrics_hz": engine_cfg.metrics_hz})))
                    }
                    Ok(Executed::Deferred(Plan::Transport(action))) => match action {
                        TransportAction::Start => {
                            running = true;
                            if !threads_started {
                                if let Err(e) = start_threads(&mut video_handle, &mut audio_handle) {
                                    break Err(e);
                                }
                                threads_started = true;
                            }
                            let _ = rec.annotate("transport start");
                            Some(Reply::ok(message.request_id, json!({"running": true})))
                        }
                        TransportAction::Stop => {
                            running = false;
                            let _ = rec.annotate("transport stop");
                            Some(Reply::ok(message.request_id, json!({"running": false})))
                        }
                        TransportAction::Recalibrate if threads_started => {
                            let _ = recal_tx.send(Recalibrate { request_id: message.request_id, outbox: outbox.clone() });
                            None
                        }
                        TransportAction::Recalibrate => Some(Reply::error(
                            message.request_id,
                            ReplyError::new(ErrorCode::State, "video not running"),
                        )),
                    },
                    Ok(Executed::Deferred(other)) => Some(Reply::error(
                        message.request_id,
                        ReplyError::new(ErrorCode::State, format!("unhandled plan {other:?}")),
                    )),
                    Err(e) => Some(Reply::error(message.request_id, e)),
                };
                if let Some(r) = reply {
                    outbox.reply(r);
                }
            },
            default(Duration::from_millis(50)) => {}
        }
    };

    stop.store(true, Ordering::SeqCst);
    drop(video_rx);
    report.dropped_audio_actions = dispatch.dropped;
    if let Some(h) = video_handle {
        match h.join() {
            Ok(Err(e)) => warn!("video thread: {e}"),
            Err(_) => warn!("video thread panicked"),
            Ok(Ok(())) => {}
        }
    }
    let output = audio_handle.map(|h| h.join().unwrap_or_default()).unwrap_or_default();
    if let Some(s) = server {
        s.shutdown();
    }

    let blocks = stats.blocks.load(Ordering::Relaxed);
    report.audio_blocks = blocks;
    report.deadline_misses = stats.misses.load(Ordering::Relaxed);
    report.max_block_process_us = stats.max_process_ns.load(Ordering::Relaxed) as f64 / 1e3;
    report.mean_block_process_us = if blocks > 0 {
        stats.total_process_ns.load(Ordering::Relaxed) as f64 / 1e3 / blocks as f64
    } else {
        0.0
    };
    report.max_block_lateness_us = stats.max_lateness_ns.load(Ordering::Relaxed) as f64 / 1e3;
    report.metrics_published = hub.published();
    report.subscribers_dropped = hub.dropped();
    report.osc_sent = osc.as_ref().map_or(0, |o| o.sent());

    match session {
        Ok(()) => {
            rec.finish()?;
        }
        Err(e) => {
            // Leave the trailer off so readers see a truncated log.
            let _ = rec.flush();
            return Err(e);
        }
    }
    if let Some(path) = &opts.output_wav {
        write_wav_file(
            path,
            &MonoAudio {
                sample_rate: fs,
                samples: output,
            },
        )?;
    }
    Ok(report)
}
