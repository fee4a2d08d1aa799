//! Saliency of Action: rolling population variance over QoM or over
//! parameter-change magnitudes, plus the threshold trigger driven by it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_LONG_WINDOW: usize = 1024;

/// Fixed-capacity window with O(1) mean and sum-of-squared-deviations
/// updates. Once full, each push evicts the oldest sample.
#[derive(Debug, Clone)]
pub struct RollingWindow {
    capacity: usize,
    samples: VecDeque<f64>,
    mean: f64,
    m2: f64,
    /// Largest `m2` since the last re-anchor; rounding error scales with it.
    m2_peak: f64,
    since_anchor: usize,
}

/// Re-anchor once `m2` falls this far below its recent peak, before
/// cancellation error can reach the 1e-9 relative level.
const CANCELLATION_RATIO: f64 = 1e-4;

impl RollingWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::InvalidInput(format!("window capacity must be >= 2, got {capacity}")));
        }
        Ok(Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
            mean: 0.0,
            m2: 0.0,
            m2_peak: 0.0,
            since_anchor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().copied()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.m2 / self.samples.len() as f64).max(0.0)
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.mean = 0.0;
        self.m2 = 0.0;
        self.m2_peak = 0.0;
        self.since_anchor = 0;
    }

    /// Appends `x` and returns the population variance of the contents.
    pub fn push(&mut self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite sample {x}")));
        }
        if self.samples.len() == self.capacity {
            let old = self.samples.pop_front().expect("full window");
            self.samples.push_back(x);
            let n = self.capacity as f64;
            let old_mean = self.mean;
            self.mean += (x - old) / n;
            self.m2 += (x - old) * (x - self.mean + old - old_mean);
            self.since_anchor += 1;
            // Eviction updates accumulate rounding; re-derive once per full
            // turnover, or sooner when a large sample has just left.
            if self.since_anchor >= self.capacity || self.m2 < self.m2_peak * CANCELLATION_RATIO {
                self.reanchor();
            }
        } else {
            self.samples.push_back(x);
            let n = self.samples.len() as f64;
            let delta = x - self.mean;
            self.mean += delta / n;
            self.m2 += delta * (x - self.mean);
        }
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
        self.m2_peak = self.m2_peak.max(self.m2);
        Ok(self.variance())
    }

    fn reanchor(&mut self) {
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &x) in self.samples.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        self.mean = mean;
        self.m2 = m2;
        self.m2_peak = m2;
        self.since_anchor = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SoaSource {
    #[default]
    QomVariance,
    ParamChangeVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencySample {
    pub s: f64,
    pub source: SoaSource,
    pub timestamp: u64,
}

/// Owns the SoA window and tags its output with the active source.
#[derive(Debug, Clone)]
pub struct SaliencyTracker {
    source: SoaSource,
    window: RollingWindow,
}

impl SaliencyTracker {
    pub fn new(source: SoaSource, window: usize) -> Result<Self> {
        Ok(Self {
            source,
            window: RollingWindow::new(window)?,
        })
    }

    pub fn source(&self) -> SoaSource {
        self.source
    }

    pub fn window(&self) -> &RollingWindow {
        &self.window
    }

    /// Switching sources empties the window so units never mix.
    pub fn select_source(&mut self, source: SoaSource) {
        if source != self.source {
            self.source = source;
            self.window.clear();
        }
    }

    pub fn push_and_variance(&mut self, x: f64, timestamp: u64) -> Result<SaliencySample> {
        let s = self.window.push(x)?;
        Ok(SaliencySample {
            s,
            source: self.source,
            timestamp,
        })
    }

    /// Pushes each |Δparam| in order. With no deltas the window is left
    /// untouched and its current variance is reported.
    pub fn soa_from_parameter_changes(&mut self, magnitudes: &[f64], timestamp: u64) -> Result<SaliencySample> {
        if let Some(bad) = magnitudes.iter().find(|m| !m.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite parameter delta {bad}")));
        }
        let mut s = self.window.variance();
        for &m in magnitudes {
            s = self.window.push(m.abs())?;
        }
        Ok(SaliencySample {
            s,
            source: SoaSource::ParamChangeVariance,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub theta_hi: f64,
    pub theta_lo: f64,
    /// Minimum sample gap between two firings.
    pub refractory: u64,
    pub adaptive: bool,
    pub k_adapt: f64,
    pub long_window: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            theta_hi: 0.003,
            theta_lo: 0.001,
            refractory: 30,
            adaptive: false,
            k_adapt: 3.0,
            long_window: DEFAULT_LONG_WINDOW,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_hi.is_finite() && self.theta_lo.is_finite()) {
            return Err(Error::InvalidInput("thresholds must be finite".into()));
        }
        if !(0.0 <= self.theta_lo && self.theta_lo <= self.theta_hi) {
            return Err(Error::InvalidInput(format!(
                "thresholds must satisfy 0 <= theta_lo <= theta_hi, got theta_lo={} theta_hi={}",
                self.theta_lo, self.theta_hi
            )));
        }
        if self.adaptive {
            if self.long_window <= 2 {
                return Err(Error::InvalidInput("long_window must be > 2 when adaptive".into()));
            }
            if !self.k_adapt.is_finite() {
                return Err(Error::InvalidInput("k_adapt must be finite".into()));
            }
        }
        Ok(())
    }

    fn lo_ratio(&self) -> f64 {
        if self.theta_hi > 0.0 {
            self.theta_lo / self.theta_hi
        } else {
            0.0
        }
    }
}

/// Effective `(theta_hi, theta_lo)`. `long_stats` is `(mean, std)` of S over
/// a filled long window; `None` (or a non-adaptive config) yields the static
/// thresholds.
pub fn adaptive_threshold(long_stats: Option<(f64, f64)>, cfg: &TriggerConfig) -> (f64, f64) {
    match long_stats {
        Some((mean, std)) if cfg.adaptive => {
            let hi = mean + cfg.k_adapt * std;
            (hi, hi * cfg.lo_ratio())
        }
        _ => (cfg.theta_hi, cfg.theta_lo),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub timestamp: u64,
    pub sample_index: u64,
    pub s_at_fire: f64,
    pub threshold_at_fire: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerPhase {
    Armed,
    Disarmed,
}

/// Threshold trigger with hysteresis and a refractory period.
///
/// One transition per sample: an armed trigger fires when S reaches the
/// effective high threshold and the refractory gap has elapsed; a disarmed
/// trigger re-arms once S falls to the low threshold.
#[derive(Debug, Clone)]
pub struct Trigger {
    cfg: TriggerConfig,
    phase: TriggerPhase,
    last_fire: Option<u64>,
    history: Option<RollingWindow>,
    effective: (f64, f64),
}

impl Trigger {
    pub fn new(cfg: TriggerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            history: Self::history_for(&cfg)?,
            effective: (cfg.theta_hi, cfg.theta_lo),
            cfg,
            phase: TriggerPhase::Armed,
            last_fire: None,
        })
    }

    fn history_for(cfg: &TriggerConfig) -> Result<Option<RollingWindow>> {
        if cfg.adaptive {
            RollingWindow::new(cfg.long_window).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn config(&self) -> &TriggerConfig {
        &self.cfg
    }

    /// Replaces the configuration, keeping phase and refractory bookkeeping.
    pub fn reconfigure(&mut self, cfg: TriggerConfig) -> Result<()> {
        cfg.validate()?;
        let keep_history = cfg.adaptive && self.cfg.adaptive && cfg.long_window == self.cfg.long_window;
        if !keep_history {
            self.history = Self::history_for(&cfg)?;
        }
        self.cfg = cfg;
        self.effective = self.current_thresholds();
        Ok(())
    }

    pub fn phase(&self) -> TriggerPhase {
        self.phase
    }

    /// Thresholds used for the most recent sample.
    pub fn effective_thresholds(&self) -> (f64, f64) {
        self.effective
    }

    fn current_thresholds(&self) -> (f64, f64) {
        let stats = self
            .history
            .as_ref()
            .filter(|h| h.is_full())
            .map(|h| (h.mean(), h.std_dev()));
        adaptive_threshold(stats, &self.cfg)
    }

    pub fn evaluate(&mut self, sample: &SaliencySample, sample_index: u64) -> Option<TriggerEvent> {
        // Thresholds come from S history *before* this sample.
        let (hi, lo) = self.current_thresholds();
        self.effective = (hi, lo);
        if let Some(h) = self.history.as_mut() {
            // `s` is finite by construction of SaliencySample.
            let _ = h.push(sample.s);
        }
        match self.phase {
            TriggerPhase::Armed => {
                let rested = self
                    .last_fire
                    .is_none_or(|last| sample_index.saturating_sub(last) >= self.cfg.refractory);
                if sample.s >= hi && rested {
                    self.phase = TriggerPhase::Disarmed;
                    self.last_fire = Some(sample_index);
                    return Some(TriggerEvent {
                        timestamp: sample.timestamp,
                        sample_index,
                        s_at_fire: sample.s,
                        threshold_at_fire: hi,
                    });
                }
                None
            }
            TriggerPhase::Disarmed => {
                if sample.s <= lo {
                    self.phase = TriggerPhase::Armed;
                }
                None
            }
        }
    }
}
