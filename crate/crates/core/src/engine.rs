//! The deterministic scheduler: one tick per motion sample.
//!
//! Given the same configs and the same input records (motion, envelope,
//! control changes) in the same order, an [`Engine`] emits the same derived
//! records bit for bit. Live mode, offline scenarios and replay all drive it
//! the same way.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::audio::{ChainSpec, CommandOrigin, ParamAddress, ParameterCommand};
use crate::config::{digest_of, EngineConfig, SessionConfigs};
use crate::error::{Error, Result};
use crate::mapping::{apply_routes, validate_mapping, MappingConfig};
use crate::motion::MotionSample;
use crate::record::{ControlRecord, EngineChange, EnvelopeSample, Record, SectionChange, SectionChangeCause};
use crate::saliency::{SaliencySample, SaliencyTracker, SoaSource, Trigger, TriggerConfig};
use crate::score::{advance, check_duration, sample_section, Score, ScoreAction, ScoreState};

/// Snapshot published to monitoring clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub timestamp: u64,
    pub qom: f64,
    pub soa: f64,
    pub effective_theta_hi: f64,
    /// A trigger fired since the previous frame.
    pub trigger_flag: bool,
    pub current_section: usize,
    pub envelope: f64,
}

/// Emits at most one frame per `1/rate` of engine time.
#[derive(Debug, Clone)]
pub struct MetricsDecimator {
    period_us: f64,
    next_due: Option<f64>,
}

impl MetricsDecimator {
    pub fn new(rate_hz: f64) -> Self {
        Self {
            period_us: 1e6 / rate_hz,
            next_due: None,
        }
    }

    pub fn due(&mut self, timestamp: u64) -> bool {
        let t = timestamp as f64;
        let next = *self.next_due.get_or_insert(t);
        if t < next {
            return false;
        }
        let mut n = next + self.period_us;
        while n <= t {
            n += self.period_us;
        }
        self.next_due = Some(n);
        true
    }
}

pub struct Engine {
    cfg: EngineConfig,
    score: Score,
    mapping: MappingConfig,
    chain: ChainSpec,
    tracker: SaliencyTracker,
    trigger: Trigger,
    state: ScoreState,
    started: bool,
    sample_index: u64,
    now: u64,
    envelope: f64,
    /// Last commanded value of every parameter, normalized to its range.
    values: HashMap<ParamAddress, f64>,
    /// User-directed change magnitudes since the previous tick.
    pending_changes: Vec<f64>,
    latest: MetricsFrame,
    fired_since_frame: bool,
    decimator: MetricsDecimator,
}

impl Engine {
    pub fn new(configs: &SessionConfigs) -> Result<Self> {
        configs.validate()?;
        let cfg = configs.engine.clone();
        let mut values = HashMap::new();
        for unit in &configs.chain.units {
            for spec in unit.kind.params(configs.chain.sample_rate) {
                let v = unit.params.get(spec.name).copied().unwrap_or(spec.default);
                values.insert(ParamAddress::new(&unit.id, spec.name), spec.range.normalize(v));
            }
        }
        Ok(Self {
            tracker: SaliencyTracker::new(cfg.soa_source, cfg.soa_window)?,
            trigger: Trigger::new(cfg.trigger)?,
            state: ScoreState::new(&configs.score),
            started: false,
            sample_index: 0,
            now: 0,
            envelope: 0.0,
            values,
            pending_changes: Vec::new(),
            latest: MetricsFrame {
                timestamp: 0,
                qom: 0.0,
                soa: 0.0,
                effective_theta_hi: cfg.trigger.theta_hi,
                trigger_flag: false,
                current_section: 0,
                envelope: 0.0,
            },
            fired_since_frame: false,
            decimator: MetricsDecimator::new(cfg.metrics_hz),
            cfg,
            score: configs.score.clone(),
            mapping: configs.mapping.clone(),
            chain: configs.chain.clone(),
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn score(&self) -> &Score {
        &self.score
    }

    pub fn mapping(&self) -> &MappingConfig {
        &self.mapping
    }

    pub fn chain(&self) -> &ChainSpec {
        &self.chain
    }

    pub fn trigger_config(&self) -> &TriggerConfig {
        self.trigger.config()
    }

    pub fn soa_source(&self) -> SoaSource {
        self.tracker.source()
    }

    pub fn current_section(&self) -> usize {
        self.state.current_section
    }

    pub fn score_state(&self) -> &ScoreState {
        &self.state
    }

    pub fn latest_metrics(&self) -> MetricsFrame {
        self.latest
    }

    /// The next decimated metrics frame, if one is due at the current time.
    pub fn metrics_due(&mut self) -> Option<MetricsFrame> {
        if !self.decimator.due(self.now) {
            return None;
        }
        let mut frame = self.latest;
        frame.trigger_flag = std::mem::take(&mut self.fired_since_frame);
        Some(frame)
    }

    fn check_time(&self, timestamp: u64) -> Result<()> {
        if timestamp < self.now {
            return Err(Error::InvalidInput(format!(
                "timestamp {timestamp} precedes engine time {}",
                self.now
            )));
        }
        Ok(())
    }

    pub fn observe_envelope(&mut self, sample: EnvelopeSample) -> Result<()> {
        self.check_time(sample.timestamp)?;
        if !(0.0..=1.0).contains(&sample.envelope) {
            return Err(Error::InvalidInput(format!("envelope {} outside [0, 1]", sample.envelope)));
        }
        self.now = sample.timestamp;
        self.envelope = sample.envelope;
        self.latest.envelope = sample.envelope;
        Ok(())
    }

    fn note_command(&mut self, cmd: &ParameterCommand) {
        let Some(range) = self.chain.resolve(&cmd.target) else {
            return;
        };
        let v = range.normalize(range.clamp(cmd.value));
        let prev = self.values.insert(cmd.target.clone(), v).unwrap_or(v);
        if cmd.origin != CommandOrigin::Score {
            self.pending_changes.push((v - prev).abs());
        }
    }

    fn emit_sample(&mut self, sal: &SaliencySample, out: &mut Vec<Record>) {
        let section = &self.score.sections[self.state.current_section];
        let set = sample_section(section, sal, &self.score, &mut self.state);
        for (target, v) in set {
            // Targets were resolved when the score was accepted.
            let range = self.chain.resolve(&target).expect("score target resolves");
            let cmd = ParameterCommand {
                target,
                value: range.denormalize(v),
                ramp_ms: self.score.ramp_ms,
                origin: CommandOrigin::Score,
                timestamp: sal.timestamp,
            };
            self.note_command(&cmd);
            out.push(Record::ParameterCommand(cmd));
        }
    }

    /// Runs saliency, trigger, score and mapping for one motion sample and
    /// returns the derived records in log order.
    pub fn tick(&mut self, motion: &MotionSample) -> Result<Vec<Record>> {
        self.check_time(motion.timestamp)?;
        if !(0.0..=1.0).contains(&motion.qom) {
            return Err(Error::InvalidInput(format!("qom {} outside [0, 1]", motion.qom)));
        }
        let ts = motion.timestamp;
        self.now = ts;
        let sal = match self.tracker.source() {
            SoaSource::QomVariance => self.tracker.push_and_variance(motion.qom, ts)?,
            SoaSource::ParamChangeVariance => {
                let changes = std::mem::take(&mut self.pending_changes);
                self.tracker.soa_from_parameter_changes(&changes, ts)?
            }
        };
        self.pending_changes.clear();
        let mut out = vec![Record::Saliency(sal)];

        let fired = self.trigger.evaluate(&sal, self.sample_index);
        self.sample_index += 1;

        if !self.started {
            self.started = true;
            self.state.section_entered_at = Some(ts);
            self.emit_sample(&sal, &mut out);
        }
        if let Some(ScoreAction::Advanced { from, to }) = check_duration(&mut self.state, &self.score, ts) {
            out.push(Record::SectionChange(SectionChange {
                timestamp: ts,
                from,
                to,
                cause: SectionChangeCause::Duration,
            }));
            self.emit_sample(&sal, &mut out);
        }
        if let Some(ev) = fired {
            out.push(Record::Trigger(ev));
            self.fired_since_frame = true;
            let action = advance(&mut self.state, &self.score, ts);
            if let ScoreAction::Advanced { from, to } = action {
                out.push(Record::SectionChange(SectionChange {
                    timestamp: ts,
                    from,
                    to,
                    cause: SectionChangeCause::Trigger,
                }));
            }
            if action.wants_sample() {
                self.emit_sample(&sal, &mut out);
            }
        }

        for cmd in apply_routes(motion, &sal, self.envelope, &self.mapping, self.score.s_ref) {
            self.note_command(&cmd);
            out.push(Record::ParameterCommand(cmd));
        }

        self.latest = MetricsFrame {
            timestamp: ts,
            qom: motion.qom,
            soa: sal.s,
            effective_theta_hi: self.trigger.effective_thresholds().0,
            trigger_flag: false,
            current_section: self.state.current_section,
            envelope: self.envelope,
        };
        Ok(out)
    }

    /// Checks a change against the current state without applying it.
    pub fn check_change(&self, change: &EngineChange) -> Result<()> {
        match change {
            EngineChange::SetTrigger { trigger, .. } => trigger.validate(),
            EngineChange::LoadScore { score } => {
                let mut errs = score.validate();
                errs.extend(score.validate_targets(&self.chain));
                errs.into_result().map_err(Error::from)
            }
            EngineChange::LoadMapping { mapping } => validate_mapping(mapping, &self.chain).map_err(Error::from),
            EngineChange::SetActive { unit, .. } => match self.chain.unit(unit) {
                Some(_) => Ok(()),
                None => Err(Error::UnknownUnit(unit.clone())),
            },
        }
    }

    /// Applies a change at the current engine time and returns its log record.
    /// An invalid change leaves the engine untouched.
    pub fn apply_change(&mut self, change: EngineChange) -> Result<Record> {
        self.check_change(&change)?;
        match &change {
            EngineChange::SetTrigger { trigger, soa_source } => {
                self.trigger.reconfigure(*trigger)?;
                self.tracker.select_source(*soa_source);
                self.cfg.trigger = *trigger;
                self.cfg.soa_source = *soa_source;
                if !trigger.adaptive {
                    self.latest.effective_theta_hi = trigger.theta_hi;
                }
            }
            EngineChange::LoadScore { score } => {
                self.score = score.clone();
                self.state = ScoreState::new(score);
                self.started = false;
                self.latest.current_section = 0;
            }
            EngineChange::LoadMapping { mapping } => self.mapping = mapping.clone(),
            EngineChange::SetActive { .. } => {}
        }
        Ok(Record::Control(ControlRecord {
            timestamp: self.now,
            change,
        }))
    }

    /// A direct parameter write from the control plane. Out-of-range values
    /// are rejected rather than clamped.
    pub fn apply_parameter(&mut self, target: ParamAddress, value: f64, ramp_ms: f64) -> Result<Record> {
        let range = self.chain.resolve_or_err(&target)?;
        if !value.is_finite() || !range.contains(value) {
            return Err(Error::InvalidInput(format!(
                "{target}={value} outside [{}, {}]",
                range.lo, range.hi
            )));
        }
        if !(ramp_ms.is_finite() && ramp_ms >= 0.0) {
            return Err(Error::InvalidInput(format!("ramp_ms must be >= 0, got {ramp_ms}")));
        }
        let cmd = ParameterCommand {
            target,
            value,
            ramp_ms,
            origin: CommandOrigin::ControlPlane,
            timestamp: self.now,
        };
        self.note_command(&cmd);
        Ok(Record::ParameterCommand(cmd))
    }

    /// Feeds a logged input record back in; derived records are returned
    /// for ticks and ignored otherwise.
    pub fn feed(&mut self, record: &Record) -> Result<Vec<Record>> {
        match record {
            Record::Motion(m) => self.tick(m),
            Record::Envelope(e) => self.observe_envelope(*e).map(|_| Vec::new()),
            Record::Control(c) => {
                self.check_time(c.timestamp)?;
                self.now = c.timestamp;
                self.apply_change(c.change.clone()).map(|_| Vec::new())
            }
            Record::ParameterCommand(c) if c.origin == CommandOrigin::ControlPlane => {
                self.check_time(c.timestamp)?;
                self.now = c.timestamp;
                self.apply_parameter(c.target.clone(), c.value, c.ramp_ms).map(|_| Vec::new())
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Digests of the configuration currently in force.
    pub fn current_digests(&self) -> crate::config::ConfigDigests {
        crate::config::ConfigDigests {
            engine: digest_of(&self.cfg),
            score: digest_of(&self.score),
            mapping: digest_of(&self.mapping),
            chain: digest_of(&self.chain),
        }
    }
}
