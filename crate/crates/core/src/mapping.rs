//! Routes from control signals (QoM, SoA, input envelope) to unit parameters.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::audio::{ChainSpec, CommandOrigin, ParamAddress, ParameterCommand};
use crate::error::{ValidationErrors, ValidationKind};
use crate::motion::MotionSample;
use crate::saliency::SaliencySample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MapSource {
    Qom,
    Soa,
    AudioEnvelope,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Curve {
    Linear,
    Exponent(f64),
    Invert,
}

/// Maps normalized `x` onto `[out_lo, out_hi]`. Out-of-range `x` is clamped.
pub fn scale(x: f64, curve: Curve, out_lo: f64, out_hi: f64) -> f64 {
    let x = if (0.0..=1.0).contains(&x) {
        x
    } else {
        warn!("mapping input {x} outside [0, 1], clamped");
        if x.is_nan() {
            0.0
        } else {
            x.clamp(0.0, 1.0)
        }
    };
    let shaped = match curve {
        Curve::Linear => x,
        Curve::Exponent(p) => x.powf(p),
        Curve::Invert => 1.0 - x,
    };
    out_lo + shaped * (out_hi - out_lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RouteDoc", into = "RouteDoc")]
pub struct Route {
    pub source: MapSource,
    pub target: ParamAddress,
    pub curve: Curve,
    pub out_lo: f64,
    pub out_hi: f64,
    pub smoothing_ms: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
enum CurveName {
    Linear,
    Exponent,
    Invert,
}

fn enabled_default() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct RouteDoc {
    source: MapSource,
    target: ParamAddress,
    curve: CurveName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    out_lo: f64,
    out_hi: f64,
    #[serde(default)]
    smoothing_ms: f64,
    #[serde(default = "enabled_default")]
    enabled: bool,
}

impl TryFrom<RouteDoc> for Route {
    type Error = String;

    fn try_from(d: RouteDoc) -> Result<Self, String> {
        let curve = match (d.curve, d.p) {
            (CurveName::Linear, _) => Curve::Linear,
            (CurveName::Invert, _) => Curve::Invert,
            (CurveName::Exponent, Some(p)) => Curve::Exponent(p),
            (CurveName::Exponent, None) => return Err("EXPONENT curve requires `p`".into()),
        };
        Ok(Route {
            source: d.source,
            target: d.target,
            curve,
            out_lo: d.out_lo,
            out_hi: d.out_hi,
            smoothing_ms: d.smoothing_ms,
            enabled: d.enabled,
        })
    }
}

impl From<Route> for RouteDoc {
    fn from(r: Route) -> Self {
        let (curve, p) = match r.curve {
            Curve::Linear => (CurveName::Linear, None),
            Curve::Exponent(p) => (CurveName::Exponent, Some(p)),
            Curve::Invert => (CurveName::Invert, None),
        };
        RouteDoc {
            source: r.source,
            target: r.target,
            curve,
            p,
            out_lo: r.out_lo,
            out_hi: r.out_hi,
            smoothing_ms: r.smoothing_ms,
            enabled: r.enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MappingConfig {
    #[serde(default)]
    pub routes: Vec<Route>,
}

impl MappingConfig {
    /// Parses the document and checks route-local invariants. Target
    /// resolution needs a chain; see [`validate_mapping`].
    pub fn parse(text: &str) -> Result<Self, ValidationErrors> {
        let cfg: MappingConfig = serde_json::from_str(text).map_err(|e| {
            let mut errs = ValidationErrors::default();
            errs.push(
                format!("line {}, column {}", e.line(), e.column()),
                ValidationKind::Syntax,
                e.to_string(),
            );
            errs
        })?;
        cfg.check_routes().into_result()?;
        Ok(cfg)
    }

    fn check_routes(&self) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        for (i, r) in self.routes.iter().enumerate() {
            let loc = format!("routes[{i}]");
            if !(r.out_lo.is_finite() && r.out_hi.is_finite()) || r.out_lo > r.out_hi {
                errs.push(
                    format!("{loc}.out_lo"),
                    ValidationKind::Range,
                    format!("out_lo ({}) must not exceed out_hi ({})", r.out_lo, r.out_hi),
                );
            }
            if let Curve::Exponent(p) = r.curve {
                if !(p.is_finite() && p > 0.0) {
                    errs.push(format!("{loc}.p"), ValidationKind::Range, format!("exponent must be > 0, got {p}"));
                }
            }
            if !(r.smoothing_ms.is_finite() && r.smoothing_ms >= 0.0) {
                errs.push(
                    format!("{loc}.smoothing_ms"),
                    ValidationKind::Range,
                    format!("smoothing_ms must be >= 0, got {}", r.smoothing_ms),
                );
            }
        }
        errs
    }
}

/// Full check against a chain: every problem is reported, nothing is
/// partially accepted.
pub fn validate_mapping(cfg: &MappingConfig, chain: &ChainSpec) -> Result<(), ValidationErrors> {
    let mut errs = cfg.check_routes();
    let mut seen = HashSet::new();
    for (i, r) in cfg.routes.iter().enumerate() {
        if chain.resolve(&r.target).is_none() {
            errs.push(
                format!("routes[{i}].target"),
                ValidationKind::UnresolvedTarget,
                format!("route {i} targets unresolved `{}`", r.target),
            );
        }
        if r.enabled && !seen.insert((r.source, r.target.clone())) {
            errs.push(
                format!("routes[{i}]"),
                ValidationKind::Duplicate,
                format!("more than one enabled {:?} route to `{}`", r.source, r.target),
            );
        }
    }
    errs.into_result()
}

/// Saliency normalized by the score's reference scale.
pub fn normalize_soa(s: f64, s_ref: f64) -> f64 {
    (s / s_ref).clamp(0.0, 1.0)
}

/// One command per enabled route, in route order.
pub fn apply_routes(
    qom: &MotionSample,
    soa: &SaliencySample,
    envelope: f64,
    cfg: &MappingConfig,
    s_ref: f64,
) -> Vec<ParameterCommand> {
    cfg.routes
        .iter()
        .filter(|r| r.enabled)
        .map(|r| {
            let x = match r.source {
                MapSource::Qom => qom.qom,
                MapSource::Soa => normalize_soa(soa.s, s_ref),
                MapSource::AudioEnvelope => envelope,
            };
            ParameterCommand {
                target: r.target.clone(),
                value: scale(x, r.curve, r.out_lo, r.out_hi),
                ramp_ms: r.smoothing_ms,
                origin: CommandOrigin::Mapping,
                timestamp: qom.timestamp,
            }
        })
        .collect()
}
