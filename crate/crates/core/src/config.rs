//! Engine settings and the config bundle a session runs with.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::ChainSpec;
use crate::error::{Error, Result, ValidationErrors, ValidationKind};
use crate::mapping::{validate_mapping, MappingConfig};
use crate::motion::MotionConfig;
use crate::saliency::{SoaSource, TriggerConfig, DEFAULT_WINDOW};
use crate::score::{parse_score, Score};

pub const DEFAULT_METRICS_HZ: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub soa_source: SoaSource,
    pub soa_window: usize,
    pub trigger: TriggerConfig,
    pub motion: MotionConfig,
    /// Estimate the noise floor from the first frames before analysis starts.
    pub calibrate: bool,
    pub calibration_frames: usize,
    pub k_cal: f64,
    /// Recalibration is refused when the estimate exceeds this.
    pub max_noise_floor: u8,
    pub metrics_hz: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            soa_source: SoaSource::QomVariance,
            soa_window: DEFAULT_WINDOW,
            trigger: TriggerConfig::default(),
            motion: MotionConfig::default(),
            calibrate: false,
            calibration_frames: crate::motion::MIN_CALIBRATION_FRAMES,
            k_cal: 1.0,
            max_noise_floor: 40,
            metrics_hz: DEFAULT_METRICS_HZ,
        }
    }
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: EngineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.soa_window < 2 {
            return Err(Error::InvalidInput(format!("soa_window must be >= 2, got {}", self.soa_window)));
        }
        if !(self.metrics_hz.is_finite() && self.metrics_hz > 0.0) {
            return Err(Error::InvalidInput(format!("metrics_hz must be > 0, got {}", self.metrics_hz)));
        }
        if self.calibrate && self.calibration_frames < crate::motion::MIN_CALIBRATION_FRAMES {
            return Err(Error::InvalidInput(format!(
                "calibration_frames must be >= {}",
                crate::motion::MIN_CALIBRATION_FRAMES
            )));
        }
        self.motion.validate()?;
        self.trigger.validate()
    }
}

/// SHA-256 over the canonical JSON serialization, hex encoded.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDigests {
    pub engine: String,
    pub score: String,
    pub mapping: String,
    pub chain: String,
}

impl ConfigDigests {
    /// Every mismatching digest, by config name.
    pub fn compare(&self, actual: &ConfigDigests) -> Result<()> {
        for (name, logged, now) in [
            ("engine", &self.engine, &actual.engine),
            ("score", &self.score, &actual.score),
            ("mapping", &self.mapping, &actual.mapping),
            ("chain", &self.chain, &actual.chain),
        ] {
            if logged != now {
                return Err(Error::DigestMismatch {
                    name: name.into(),
                    logged: logged.clone(),
                    actual: now.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Everything a session needs, cross-validated.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfigs {
    pub engine: EngineConfig,
    pub score: Score,
    pub mapping: MappingConfig,
    pub chain: ChainSpec,
}

impl SessionConfigs {
    pub fn new(engine: EngineConfig, score: Score, mapping: MappingConfig, chain: ChainSpec) -> Result<Self> {
        let cfg = Self {
            engine,
            score,
            mapping,
            chain,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-checks score and mapping targets against the chain and reports
    /// every problem at once.
    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        let mut errs = ValidationErrors::default();
        if let Err(e) = self.chain.validate() {
            errs.extend(e);
        }
        errs.extend(self.score.validate());
        errs.extend(self.score.validate_targets(&self.chain));
        if let Err(e) = validate_mapping(&self.mapping, &self.chain) {
            errs.extend(e);
        }
        errs.into_result().map_err(Error::from)
    }

    pub fn digests(&self) -> ConfigDigests {
        ConfigDigests {
            engine: digest_of(&self.engine),
            score: digest_of(&self.score),
            mapping: digest_of(&self.mapping),
            chain: digest_of(&self.chain),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.score.seed = seed;
        self
    }

    /// Loads the four documents; a missing engine file means defaults.
    /// Every missing or invalid file is reported together.
    pub fn load(engine: Option<&Path>, score: &Path, mapping: &Path, chain: &Path) -> Result<Self> {
        let mut missing = ValidationErrors::default();
        for p in [Some(score), Some(mapping), Some(chain), engine].into_iter().flatten() {
            if !p.exists() {
                missing.push(p.display().to_string(), ValidationKind::Structure, "missing file");
            }
        }
        if !missing.is_empty() {
            return Err(missing.into());
        }
        let mut errs = ValidationErrors::default();
        let chain_doc = parse_file(chain, &mut errs, ChainSpec::parse);
        let score_doc = parse_file(score, &mut errs, |t| Ok(parse_score(t, chain_doc.as_ref())?));
        let mapping_doc = parse_file(mapping, &mut errs, |t| {
            let m = MappingConfig::parse(t)?;
            if let Some(c) = &chain_doc {
                validate_mapping(&m, c)?;
            }
            Ok(m)
        });
        let engine_doc = engine.and_then(|p| parse_file(p, &mut errs, EngineConfig::parse));
        let (Some(chain), Some(score), Some(mapping), true) = (chain_doc, score_doc, mapping_doc, errs.is_empty()) else {
            return Err(errs.into());
        };
        let engine = engine_doc.unwrap_or_default();
        Self::new(engine, score, mapping, chain)
    }
}

/// Reads and parses one document, filing any problems under its path.
fn parse_file<T>(path: &Path, errs: &mut ValidationErrors, parse: impl FnOnce(&str) -> Result<T>) -> Option<T> {
    let outcome = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))
        .and_then(|text| parse(&text));
    match outcome {
        Ok(v) => Some(v),
        Err(Error::Validation(v)) => {
            for e in v.0 {
                errs.push(format!("{}: {}", path.display(), e.location), e.kind, e.message);
            }
            None
        }
        Err(e) => {
            errs.push(path.display().to_string(), ValidationKind::Syntax, e.to_string());
            None
        }
    }
}
