//! Mono audio path: an ordered chain of built-in DSP units under smoothed
//! parameter automation, mixed with the dry input.

mod chain;
mod ramp;
pub mod render;
mod units;
pub mod wav;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationErrors, ValidationKind};

pub use chain::{AudioBuffer, ProcessingChain, ACTIVATION_CROSSFADE_MS};
pub use ramp::LinearRamp;

/// `unit.param`, e.g. `delay.feedback`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamAddress {
    pub unit: String,
    pub param: String,
}

impl ParamAddress {
    pub fn new(unit: impl Into<String>, param: impl Into<String>) -> Self {
        Self {
            unit: unit.into(),
            param: param.into(),
        }
    }
}

impl fmt::Display for ParamAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.unit, self.param)
    }
}

impl FromStr for ParamAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('.') {
            Some((u, p)) if !u.is_empty() && !p.is_empty() && !p.contains('.') => Ok(Self::new(u, p)),
            _ => Err(Error::InvalidInput(format!(
                "parameter address `{s}` must have the form unit.param"
            ))),
        }
    }
}

impl Serialize for ParamAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnitKind {
    Gain,
    Delay,
    Ringmod,
    Lowpass,
}

/// Declared range of a unit parameter, inclusive at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    /// Maps a normalized `[0, 1]` value into the range.
    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + v.clamp(0.0, 1.0) * self.span()
    }

    pub fn normalize(&self, v: f64) -> f64 {
        if self.span() > 0.0 {
            ((v - self.lo) / self.span()).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    pub range: ParamRange,
    pub default: f64,
}

impl UnitKind {
    /// Parameters of this unit kind at sample rate `fs`.
    pub fn params(self, fs: u32) -> Vec<ParamSpec> {
        let fs = f64::from(fs);
        let p = |name, lo, hi, default| ParamSpec {
            name,
            range: ParamRange { lo, hi },
            default,
        };
        match self {
            UnitKind::Gain => vec![p("level", 0.0, 2.0, 1.0)],
            UnitKind::Delay => vec![
                p("time_samples", 1.0, fs, (fs * 0.25).round()),
                p("feedback", 0.0, 0.95, 0.3),
                p("mix", 0.0, 1.0, 0.5),
            ],
            UnitKind::Ringmod => vec![p("freq_hz", 0.0, fs / 2.0, 440.0), p("mix", 0.0, 1.0, 0.5)],
            // Cutoff is open at both ends of (0, fs/2); the declared range
            // stays strictly inside.
            UnitKind::Lowpass => vec![
                p("cutoff_hz", 10.0, fs * 0.49, 2000.0),
                p("q", 0.1, 10.0, std::f64::consts::FRAC_1_SQRT_2),
            ],
        }
    }

    pub fn param(self, fs: u32, name: &str) -> Option<ParamSpec> {
        self.params(fs).into_iter().find(|p| p.name == name)
    }
}

fn default_gain() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub id: String,
    pub kind: UnitKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default = "default_true")]
    pub active: bool,
}

/// Chain document: what units run, in which order, with which settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub sample_rate: u32,
    pub block_size: usize,
    #[serde(default = "default_gain")]
    pub dry_gain: f64,
    #[serde(default = "default_gain")]
    pub wet_gain: f64,
    #[serde(default)]
    pub units: Vec<UnitSpec>,
}

impl ChainSpec {
    pub fn empty(sample_rate: u32, block_size: usize) -> Self {
        Self {
            sample_rate,
            block_size,
            dry_gain: 1.0,
            wet_gain: 0.0,
            units: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec: ChainSpec = serde_json::from_str(text)?;
        spec.fill_defaults();
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Adds declared defaults for parameters the document leaves out.
    pub fn fill_defaults(&mut self) {
        let fs = self.sample_rate;
        for unit in &mut self.units {
            for p in unit.kind.params(fs) {
                unit.params.entry(p.name.to_string()).or_insert(p.default);
            }
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ValidationErrors> {
        let mut errs = ValidationErrors::default();
        if self.sample_rate != 44_100 && self.sample_rate != 48_000 {
            errs.push(
                "sample_rate",
                ValidationKind::Range,
                format!("sample_rate must be 44100 or 48000, got {}", self.sample_rate),
            );
        }
        if !self.block_size.is_power_of_two() || !(64..=2048).contains(&self.block_size) {
            errs.push(
                "block_size",
                ValidationKind::Range,
                format!("block_size must be a power of two in [64, 2048], got {}", self.block_size),
            );
        }
        for (name, g) in [("dry_gain", self.dry_gain), ("wet_gain", self.wet_gain)] {
            if !(0.0..=1.0).contains(&g) {
                errs.push(name, ValidationKind::Range, format!("{name} must be in [0, 1], got {g}"));
            }
        }
        let mut seen = HashSet::new();
        for (i, unit) in self.units.iter().enumerate() {
            let loc = format!("units[{i}]");
            if unit.id.is_empty() || unit.id.contains('.') || unit.id.contains('/') {
                errs.push(
                    format!("{loc}.id"),
                    ValidationKind::Structure,
                    format!("unit id `{}` must be non-empty without '.' or '/'", unit.id),
                );
            }
            if !seen.insert(unit.id.as_str()) {
                errs.push(
                    format!("{loc}.id"),
                    ValidationKind::Duplicate,
                    format!("duplicate unit id `{}`", unit.id),
                );
            }
            let specs = unit.kind.params(self.sample_rate);
            for (name, &v) in &unit.params {
                match specs.iter().find(|s| s.name == name) {
                    None => errs.push(
                        format!("{loc}.params.{name}"),
                        ValidationKind::Structure,
                        format!("{:?} unit has no parameter `{name}`", unit.kind),
                    ),
                    Some(s) if !s.range.contains(v) => errs.push(
                        format!("{loc}.params.{name}"),
                        ValidationKind::Range,
                        format!("{name}={v} outside [{}, {}]", s.range.lo, s.range.hi),
                    ),
                    Some(_) => {}
                }
            }
            for s in &specs {
                if !unit.params.contains_key(s.name) {
                    errs.push(
                        format!("{loc}.params.{}", s.name),
                        ValidationKind::Structure,
                        format!("missing parameter `{}`", s.name),
                    );
                }
            }
        }
        errs.into_result()
    }

    pub fn unit(&self, id: &str) -> Option<&UnitSpec> {
        self.units.iter().find(|u| u.id == id)
    }

    pub fn resolve(&self, addr: &ParamAddress) -> Option<ParamRange> {
        let unit = self.unit(&addr.unit)?;
        unit.kind.param(self.sample_rate, &addr.param).map(|p| p.range)
    }

    pub fn resolve_or_err(&self, addr: &ParamAddress) -> Result<ParamRange> {
        self.resolve(addr)
            .ok_or_else(|| Error::UnresolvedTarget(addr.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandOrigin {
    Mapping,
    Score,
    ControlPlane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCommand {
    pub target: ParamAddress,
    pub value: f64,
    pub ramp_ms: f64,
    pub origin: CommandOrigin,
    pub timestamp: u64,
}

/// Root-mean-square of a block, clamped to `[0, 1]`.
pub fn envelope_follow(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
    (sum / samples.len() as f64).sqrt().clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_parsing() {
        let a: ParamAddress = "delay.feedback".parse().unwrap();
        assert_eq!(a, ParamAddress::new("delay", "feedback"));
        assert_eq!(a.to_string(), "delay.feedback");
        assert!("delay".parse::<ParamAddress>().is_err());
        assert!(".x".parse::<ParamAddress>().is_err());
        assert!("a.b.c".parse::<ParamAddress>().is_err());
    }

    #[test]
    fn chain_validation_collects_everything() {
        let doc = r#"{"sample_rate": 22050, "block_size": 100, "dry_gain": 2.0,
            "units": [{"id": "g", "kind": "GAIN", "params": {"level": 3.0}},
                      {"id": "g", "kind": "DELAY", "params": {"bogus": 1.0}}]}"#;
        let err = match ChainSpec::parse(doc) {
            Err(Error::Validation(v)) => v,
            other => panic!("expected validation error, got {other:?}"),
        };
        let locs: Vec<_> = err.iter().map(|e| e.location.as_str()).collect();
        for expected in ["sample_rate", "block_size", "dry_gain", "units[0].params.level", "units[1].id", "units[1].params.bogus"] {
            assert!(locs.contains(&expected), "missing {expected} in {locs:?}");
        }
    }

    #[test]
    fn defaults_fill_missing_params() {
        let doc = r#"{"sample_rate": 48000, "block_size": 512,
            "units": [{"id": "d", "kind": "DELAY"}]}"#;
        let spec = ChainSpec::parse(doc).unwrap();
        assert_eq!(spec.units[0].params["time_samples"], 12000.0);
        assert!(spec.units[0].active);
        let r = spec.resolve(&"d.feedback".parse().unwrap()).unwrap();
        assert_eq!((r.lo, r.hi), (0.0, 0.95));
        assert!(spec.resolve(&"delay9.mix".parse().unwrap()).is_none());
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(envelope_follow(&[0.0; 256]), 0.0);
        let square: Vec<f32> = (0..256).map(|i| if (i / 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(envelope_follow(&square), 1.0);
        let a = 0.6f64;
        // 480 samples = 10 whole periods of 1 kHz at 48 kHz.
        let sine: Vec<f32> = (0..480)
            .map(|n| (a * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 48000.0).sin()) as f32)
            .collect();
        assert!((envelope_follow(&sine) - a / 2f64.sqrt()).abs() < 1e-3);
        assert_eq!(envelope_follow(&[2.0; 4]), 1.0);
    }
}
