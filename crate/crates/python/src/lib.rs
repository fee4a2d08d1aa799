//! Python bindings. Documents (score, mapping, chain, engine settings) and
//! records cross the boundary as JSON text; frames as `bytes`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vivo_core::audio::render::render_offline as core_render;
use vivo_core::audio::ChainSpec;
use vivo_core::config::{EngineConfig, SessionConfigs};
use vivo_core::control::protocol::{ControlMessage, ErrorCode, Reply, ReplyError, ServerMessage};
use vivo_core::control::{plan, Plan};
use vivo_core::engine::Engine as CoreEngine;
use vivo_core::mapping::MappingConfig;
use vivo_core::motion::{self, LuminanceGrid, MotionSample};
use vivo_core::saliency::{self, SaliencySample, SoaSource, TriggerConfig};
use vivo_core::score::parse_score;
use vivo_core::session::scenario::{self, ScenarioAssets};
use vivo_core::session::{self, SessionLog, TimelineOptions};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grid(pixels: &[u8], width: usize, height: usize, timestamp_us: u64) -> PyResult<LuminanceGrid> {
    LuminanceGrid::new(width, height, pixels.to_vec(), timestamp_us).map_err(err)
}

fn configs(score: &str, mapping: &str, chain: &str, engine: Option<&str>) -> PyResult<SessionConfigs> {
    let chain = ChainSpec::parse(chain).map_err(err)?;
    let score = parse_score(score, Some(&chain)).map_err(err)?;
    let mapping = MappingConfig::parse(mapping).map_err(err)?;
    let engine = match engine {
        Some(t) => EngineConfig::parse(t).map_err(err)?,
        None => EngineConfig::default(),
    };
    SessionConfigs::new(engine, score, mapping, chain).map_err(err)
}

fn read_log(text: &str) -> PyResult<SessionLog> {
    SessionLog::read(text.as_bytes()).map_err(err)
}

/// Mean gated absolute difference of two 8-bit grayscale frames, in [0, 1].
#[pyfunction]
#[pyo3(signature = (prev, curr, width, height, noise_floor = 0))]
fn quantity_of_motion(prev: &[u8], curr: &[u8], width: usize, height: usize, noise_floor: u8) -> PyResult<f64> {
    let a = grid(prev, width, height, 0)?;
    let b = grid(curr, width, height, 1)?;
    motion::quantity_of_motion(&a, &b, noise_floor).map_err(err)
}

/// Noise-floor gate estimated from a still-scene recording.
#[pyfunction]
#[pyo3(signature = (frames, width, height, k_cal = 1.0))]
fn calibrate_noise_floor(frames: Vec<Vec<u8>>, width: usize, height: usize, k_cal: f64) -> PyResult<u8> {
    let grids = frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| LuminanceGrid::new(width, height, f, i as u64).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    motion::calibrate_noise_floor(&grids, k_cal).map_err(err)
}

/// Sliding-window variance, updated incrementally.
#[pyclass]
struct RollingWindow(saliency::RollingWindow);

#[pymethods]
impl RollingWindow {
    #[new]
    fn new(capacity: usize) -> PyResult<Self> {
        saliency::RollingWindow::new(capacity).map(Self).map_err(err)
    }

    /// Adds a sample and returns the variance of the window.
    fn push(&mut self, x: f64) -> PyResult<f64> {
        self.0.push(x).map_err(err)
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn variance(&self) -> f64 {
        self.0.variance()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Hysteresis trigger with a refractory period.
#[pyclass]
struct Trigger {
    inner: saliency::Trigger,
    index: u64,
}

#[pymethods]
impl Trigger {
    #[new]
    #[pyo3(signature = (theta_hi, theta_lo, refractory, adaptive = false, k_adapt = 3.0, long_window = saliency::DEFAULT_LONG_WINDOW))]
    fn new(theta_hi: f64, theta_lo: f64, refractory: u64, adaptive: bool, k_adapt: f64, long_window: usize) -> PyResult<Self> {
        let cfg = TriggerConfig {
            theta_hi,
            theta_lo,
            refractory,
            adaptive,
            k_adapt,
            long_window,
        };
        Ok(Self {
            inner: saliency::Trigger::new(cfg).map_err(err)?,
            index: 0,
        })
    }

    /// Feeds the next saliency value; returns the event dict if it fired.
    fn evaluate<'py>(&mut self, py: Python<'py>, s: f64, timestamp: u64) -> PyResult<Option<Bound<'py, PyDict>>> {
        let sample = SaliencySample {
            s,
            source: SoaSource::QomVariance,
            timestamp,
        };
        let fired = self.inner.evaluate(&sample, self.index);
        self.index += 1;
        fired
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("timestamp", e.timestamp)?;
                d.set_item("sample_index", e.sample_index)?;
                d.set_item("s_at_fire", e.s_at_fire)?;
                d.set_item("threshold_at_fire", e.threshold_at_fire)?;
                Ok(d)
            })
            .transpose()
    }

    #[getter]
    fn armed(&self) -> bool {
        self.inner.phase() == saliency::TriggerPhase::Armed
    }

    #[getter]
    fn effective_thresholds(&self) -> (f64, f64) {
        self.inner.effective_thresholds()
    }
}

/// The control engine without I/O: feed it motion samples, get records back.
#[pyclass]
struct Engine {
    inner: CoreEngine,
    frames: u64,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (score, mapping, chain, engine = None, seed = None))]
    fn new(score: &str, mapping: &str, chain: &str, engine: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = configs(score, mapping, chain, engine)?;
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        Ok(Self {
            inner: CoreEngine::new(&cfg).map_err(err)?,
            frames: 0,
        })
    }

    /// One motion sample in; the derived records out, as JSON strings.
    fn tick(&mut self, qom: f64, timestamp: u64) -> PyResult<Vec<String>> {
        self.frames += 1;
        let records = self
            .inner
            .tick(&MotionSample {
                qom,
                timestamp,
                frame_index: self.frames,
            })
            .map_err(err)?;
        records.iter().map(|r| serde_json::to_string(r).map_err(err)).collect()
    }

    /// Applies a control message (JSON) and returns the reply (JSON).
    /// Transport and subscription commands need the live runtime and are
    /// answered with a STATE error.
    fn control(&mut self, message: &str) -> String {
        let msg = match ControlMessage::parse(message) {
            Ok(m) => m,
            Err(reply) => return ServerMessage::Reply(reply).to_json(),
        };
        let id = msg.request_id.clone();
        let outcome = plan(&self.inner, &msg.command).and_then(|p| match p {
            Plan::Change(c) => self.inner.apply_change(c).map_err(ReplyError::from),
            Plan::Parameter(p) => self
                .inner
                .apply_parameter(p.target, p.value, p.ramp_ms)
                .map_err(ReplyError::from),
            other => Err(ReplyError::new(
                ErrorCode::State,
                format!("{other:?} needs a running session"),
            )),
        });
        match outcome.and_then(|r| serde_json::to_value(r).map_err(|e| ReplyError::from(vivo_core::Error::from(e)))) {
            Ok(v) => ServerMessage::Reply(Reply::ok(id, v)).to_json(),
            Err(e) => ServerMessage::Reply(Reply::error(id, e)).to_json(),
        }
    }

    #[getter]
    fn current_section(&self) -> usize {
        self.inner.current_section()
    }

    #[getter]
    fn now(&self) -> u64 {
        self.inner.now()
    }

    /// Latest metrics snapshot as JSON.
    fn metrics(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.latest_metrics()).map_err(err)
    }
}

/// Runs the bundled (or a directory's) scenario; returns a summary dict
/// including the session log text.
#[pyfunction]
#[pyo3(signature = (seed, assets_dir = None))]
fn run_scenario<'py>(py: Python<'py>, seed: u64, assets_dir: Option<std::path::PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let assets = match assets_dir {
        Some(d) => ScenarioAssets::load(&d),
        None => ScenarioAssets::bundled(),
    }
    .map_err(err)?;
    let run = scenario::run_scenario(&assets, seed).map_err(err)?;
    let timeline: Vec<(String, f64, f64)> = session::export_timeline(&run.log, &TimelineOptions::default())
        .into_iter()
        .map(|e| (e.label.as_str().to_string(), e.t_start, e.t_end))
        .collect();
    let d = PyDict::new(py);
    d.set_item("trigger_count", run.trigger_count())?;
    d.set_item("noise_floor", run.noise_floor)?;
    d.set_item("timeline", timeline)?;
    d.set_item("log", String::from_utf8_lossy(&run.log_bytes).into_owned())?;
    d.set_item("sample_rate", run.output.sample_rate)?;
    d.set_item("output", run.output.samples)?;
    Ok(d)
}

/// The bundled scenario's documents as JSON text, keyed
/// `score`, `mapping`, `chain` and `engine`.
#[pyfunction]
fn scenario_documents<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
    let c = ScenarioAssets::bundled().map_err(err)?.configs;
    let d = PyDict::new(py);
    d.set_item("score", serde_json::to_string(&c.score).map_err(err)?)?;
    d.set_item("mapping", serde_json::to_string(&c.mapping).map_err(err)?)?;
    d.set_item("chain", serde_json::to_string(&c.chain).map_err(err)?)?;
    d.set_item("engine", serde_json::to_string(&c.engine).map_err(err)?)?;
    Ok(d)
}

/// Replays a session log; returns `(exact, ticks, compared)`.
#[pyfunction]
#[pyo3(signature = (log, score, mapping, chain, seed, engine = None))]
fn replay(log: &str, score: &str, mapping: &str, chain: &str, seed: u64, engine: Option<&str>) -> PyResult<(bool, u64, usize)> {
    let cfg = configs(score, mapping, chain, engine)?.with_seed(seed);
    let report = session::replay(&read_log(log)?, &cfg).map_err(err)?;
    Ok((report.is_exact(), report.ticks, report.compared))
}

/// Labelled timeline of a session log: `[(label, start_s, end_s), ...]`.
#[pyfunction]
fn export_timeline(log: &str) -> PyResult<Vec<(String, f64, f64)>> {
    Ok(session::export_timeline(&read_log(log)?, &TimelineOptions::default())
        .into_iter()
        .map(|e| (e.label.as_str().to_string(), e.t_start, e.t_end))
        .collect())
}

/// Renders mono samples through a chain, replaying the audio actions of an
/// optional session log.
#[pyfunction]
#[pyo3(signature = (chain, samples, log = None))]
fn render_offline(chain: &str, samples: Vec<f32>, log: Option<&str>) -> PyResult<Vec<f32>> {
    let spec = ChainSpec::parse(chain).map_err(err)?;
    let trace = match log {
        Some(t) => read_log(t)?.audio_trace(),
        None => Vec::new(),
    };
    core_render(&spec, &samples, &trace).map_err(err)
}

#[pymodule]
fn vivo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantity_of_motion, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_noise_floor, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_documents, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(export_timeline, m)?)?;
    m.add_function(wrap_pyfunction!(render_offline, m)?)?;
    m.add_class::<RollingWindow>()?;
    m.add_class::<Trigger>()?;
    m.add_class::<Engine>()?;
    Ok(())
}
