//! Recording, replay, timeline export and the scripted scenario.

mod logfile;
mod replay;
pub mod scenario;
mod timeline;

use std::io::Write;

pub use logfile::{LogHeader, SessionLog, SessionWriter, Trailer, FLUSH_INTERVAL, LOG_FORMAT};
pub use replay::{replay, Divergence, ReplayReport};
pub use timeline::{export_timeline, format_table, TimelineEntry, TimelineLabel, TimelineOptions};

use crate::audio::ParamAddress;
use crate::config::SessionConfigs;
use crate::engine::{Engine, MetricsFrame};
use crate::error::Result;
use crate::motion::MotionSample;
use crate::record::{Annotation, EngineChange, EnvelopeSample, Record};

/// An [`Engine`] whose inputs and outputs all go to a session log.
pub struct Recorder<W: Write> {
    engine: Engine,
    writer: SessionWriter<W>,
}

impl<W: Write> Recorder<W> {
    pub fn new(configs: &SessionConfigs, header: &LogHeader, out: W) -> Result<Self> {
        Ok(Self {
            engine: Engine::new(configs)?,
            writer: SessionWriter::new(out, header)?,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn envelope(&mut self, sample: EnvelopeSample) -> Result<()> {
        self.engine.observe_envelope(sample)?;
        self.writer.append(&Record::Envelope(sample))
    }

    /// Ticks the engine and logs the sample followed by everything it
    /// derived. The derived records are returned for dispatch.
    pub fn motion(&mut self, sample: MotionSample) -> Result<Vec<Record>> {
        let derived = self.engine.tick(&sample)?;
        self.writer.append(&Record::Motion(sample))?;
        for r in &derived {
            self.writer.append(r)?;
        }
        Ok(derived)
    }

    pub fn change(&mut self, change: EngineChange) -> Result<Record> {
        let rec = self.engine.apply_change(change)?;
        self.writer.append(&rec)?;
        Ok(rec)
    }

    pub fn parameter(&mut self, target: ParamAddress, value: f64, ramp_ms: f64) -> Result<Record> {
        let rec = self.engine.apply_parameter(target, value, ramp_ms)?;
        self.writer.append(&rec)?;
        Ok(rec)
    }

    pub fn annotate(&mut self, text: impl Into<String>) -> Result<()> {
        let rec = Record::Annotation(Annotation {
            timestamp: self.engine.now(),
            text: text.into(),
        });
        self.writer.append(&rec)
    }

    pub fn metrics_due(&mut self) -> Option<MetricsFrame> {
        self.engine.metrics_due()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()
    }

    pub fn finish(self) -> Result<W> {
        self.writer.finish()
    }
}
