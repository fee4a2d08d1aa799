//! Stochastic scores: sections of probability distributions over
//! normalized processing parameters, whose spread is governed by saliency.
//!
//! Document format (UTF-8 JSON):
//!
//! ```json
//! {
//!   "seed": 7, "s_ref": 0.01, "wrap": true,
//!   "sections": [{
//!     "on_trigger": "ADVANCE", "duration_limit": 12.0,
//!     "distributions": [
//!       {"kind": "UNIFORM", "params": {"lo": 0.2, "hi": 0.8},
//!        "target": "delay.mix", "spread_policy": "SHRINK_WITH_LOW_SOA"}
//!     ]
//!   }]
//! }
//! ```

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{ChainSpec, ParamAddress};
use crate::error::{ValidationErrors, ValidationKind};
use crate::saliency::SaliencySample;

pub const DEFAULT_SCORE_RAMP_MS: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DistKind {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mu: f64, sigma_base: f64 },
    Choice { values: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpreadPolicy {
    #[default]
    Fixed,
    ShrinkWithLowSoa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDistribution {
    #[serde(flatten)]
    pub kind: DistKind,
    pub target: ParamAddress,
    #[serde(default)]
    pub spread_policy: SpreadPolicy,
}

impl ParamDistribution {
    /// Spread factor g(S).
    pub fn spread(&self, s: f64, s_ref: f64) -> f64 {
        match self.spread_policy {
            SpreadPolicy::Fixed => 1.0,
            SpreadPolicy::ShrinkWithLowSoa => (s / s_ref).clamp(0.0, 1.0),
        }
    }

    /// One draw before clamping to `[0, 1]`. Every kind consumes the same
    /// amount of randomness whatever `g` is.
    pub fn draw_unclamped<R: Rng + ?Sized>(&self, g: f64, rng: &mut R) -> f64 {
        match &self.kind {
            DistKind::Uniform { lo, hi } => {
                let u: f64 = rng.random();
                let mid = (lo + hi) / 2.0;
                mid + g * (hi - lo) * (u - 0.5)
            }
            DistKind::Gaussian { mu, sigma_base } => {
                let z: f64 = rng.sample(StandardNormal);
                mu + g * sigma_base * z
            }
            DistKind::Choice { values, weights } => {
                // Weights were validated at parse time.
                let idx = WeightedIndex::new(weights).map(|w| w.sample(rng)).unwrap_or(0);
                values[idx]
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, g: f64, rng: &mut R) -> f64 {
        self.draw_unclamped(g, rng).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OnTrigger {
    #[default]
    Advance,
    Resample,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<usize>,
    #[serde(default)]
    pub on_trigger: OnTrigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_limit: Option<f64>,
    pub distributions: Vec<ParamDistribution>,
}

fn default_ramp() -> f64 {
    DEFAULT_SCORE_RAMP_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub seed: u64,
    pub s_ref: f64,
    #[serde(default)]
    pub wrap: bool,
    /// Ramp applied to every parameter change the score requests.
    #[serde(default = "default_ramp")]
    pub ramp_ms: f64,
    pub sections: Vec<Section>,
}

/// Parses and validates a score document. Syntax errors carry a line and
/// column; semantic errors carry the offending field path. When `chain` is
/// given every target must resolve against it.
pub fn parse_score(text: &str, chain: Option<&ChainSpec>) -> Result<Score, ValidationErrors> {
    let mut score: Score = serde_json::from_str(text).map_err(|e| {
        let mut errs = ValidationErrors::default();
        errs.push(
            format!("line {}, column {}", e.line(), e.column()),
            ValidationKind::Syntax,
            e.to_string(),
        );
        errs
    })?;
    let mut errs = score.validate();
    if let Some(chain) = chain {
        errs.extend(score.validate_targets(chain));
    }
    errs.into_result()?;
    for (i, section) in score.sections.iter_mut().enumerate() {
        section.id = Some(i);
    }
    Ok(score)
}

impl Score {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score serializes")
    }

    pub fn validate(&self) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        if !(self.s_ref.is_finite() && self.s_ref > 0.0) {
            errs.push("s_ref", ValidationKind::Range, format!("s_ref must be > 0, got {}", self.s_ref));
        }
        if !(self.ramp_ms.is_finite() && self.ramp_ms >= 0.0) {
            errs.push("ramp_ms", ValidationKind::Range, format!("ramp_ms must be >= 0, got {}", self.ramp_ms));
        }
        if self.sections.is_empty() {
            errs.push("sections", ValidationKind::Structure, "score needs at least one section");
        }
        for (i, section) in self.sections.iter().enumerate() {
            let loc = format!("sections[{i}]");
            if let Some(id) = section.id {
                if id != i {
                    errs.push(
                        format!("{loc}.id"),
                        ValidationKind::Structure,
                        format!("section ids must be contiguous from 0: expected {i}, got {id}"),
                    );
                }
            }
            if let Some(d) = section.duration_limit {
                if !(d.is_finite() && d > 0.0) {
                    errs.push(
                        format!("{loc}.duration_limit"),
                        ValidationKind::Range,
                        format!("duration_limit must be > 0 seconds, got {d}"),
                    );
                }
            }
            if section.distributions.is_empty() {
                errs.push(
                    format!("{loc}.distributions"),
                    ValidationKind::Structure,
                    "section needs at least one distribution",
                );
            }
            for (j, dist) in section.distributions.iter().enumerate() {
                validate_distribution(&format!("{loc}.distributions[{j}]"), dist, &mut errs);
            }
        }
        errs
    }

    pub fn validate_targets(&self, chain: &ChainSpec) -> ValidationErrors {
        let mut errs = ValidationErrors::default();
        for (i, section) in self.sections.iter().enumerate() {
            for (j, dist) in section.distributions.iter().enumerate() {
                if chain.resolve(&dist.target).is_none() {
                    errs.push(
                        format!("sections[{i}].distributions[{j}].target"),
                        ValidationKind::UnresolvedTarget,
                        format!("unresolved target `{}`", dist.target),
                    );
                }
            }
        }
        errs
    }
}

fn unit_interval(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn validate_distribution(loc: &str, dist: &ParamDistribution, errs: &mut ValidationErrors) {
    let range = |errs: &mut ValidationErrors, field: &str, msg: String| {
        errs.push(format!("{loc}.params.{field}"), ValidationKind::Range, msg)
    };
    match &dist.kind {
        DistKind::Uniform { lo, hi } => {
            if lo > hi {
                range(errs, "lo", format!("lo ({lo}) must not exceed hi ({hi})"));
            }
            for (name, v) in [("lo", lo), ("hi", hi)] {
                if !unit_interval(*v) {
                    range(errs, name, format!("{name}={v} outside normalized range [0, 1]"));
                }
            }
        }
        DistKind::Gaussian { mu, sigma_base } => {
            if !unit_interval(*mu) {
                range(errs, "mu", format!("mu={mu} outside normalized range [0, 1]"));
            }
            if !(sigma_base.is_finite() && *sigma_base >= 0.0) {
                range(errs, "sigma_base", format!("sigma_base must be >= 0, got {sigma_base}"));
            }
        }
        DistKind::Choice { values, weights } => {
            if values.is_empty() {
                errs.push(format!("{loc}.params.values"), ValidationKind::Structure, "choice needs at least one value");
            }
            if values.len() != weights.len() {
                errs.push(
                    format!("{loc}.params.weights"),
                    ValidationKind::Structure,
                    format!("{} values but {} weights", values.len(), weights.len()),
                );
            }
            if let Some(v) = values.iter().find(|v| !unit_interval(**v)) {
                range(errs, "values", format!("value {v} outside normalized range [0, 1]"));
            }
            if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                range(errs, "weights", "weights must be finite and >= 0".into());
            } else if weights.iter().sum::<f64>() <= 0.0 {
                range(errs, "weights", "weights must sum to > 0".into());
            }
        }
    }
}

/// Normalized values in distribution order.
pub type ParameterSet = Vec<(ParamAddress, f64)>;

#[derive(Debug, Clone)]
pub struct ScoreState {
    pub current_section: usize,
    rng: ChaCha8Rng,
    pub last_parameter_set: BTreeMap<ParamAddress, f64>,
    pub section_entered_at: Option<u64>,
}

impl ScoreState {
    pub fn new(score: &Score) -> Self {
        Self {
            current_section: 0,
            rng: ChaCha8Rng::seed_from_u64(score.seed),
            last_parameter_set: BTreeMap::new(),
            section_entered_at: None,
        }
    }

    /// Position of the counter-based generator, in 32-bit words.
    pub fn rng_position(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

/// Draws one value per distribution of `section`, spread-scaled by `s`.
pub fn sample_section(section: &Section, s: &SaliencySample, score: &Score, state: &mut ScoreState) -> ParameterSet {
    let set: ParameterSet = section
        .distributions
        .iter()
        .map(|d| {
            let g = d.spread(s.s, score.s_ref);
            (d.target.clone(), d.draw(g, &mut state.rng))
        })
        .collect();
    for (target, v) in &set {
        state.last_parameter_set.insert(target.clone(), *v);
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreAction {
    Advanced { from: usize, to: usize },
    /// ADVANCE in the last section of a non-wrapping score.
    Clamped,
    Resample,
    Hold,
}

impl ScoreAction {
    pub fn wants_sample(self) -> bool {
        matches!(self, ScoreAction::Advanced { .. } | ScoreAction::Resample)
    }
}

fn next_section(score: &Score, current: usize) -> Option<usize> {
    if current + 1 < score.sections.len() {
        Some(current + 1)
    } else if score.wrap {
        Some(0)
    } else {
        None
    }
}

/// Applies the current section's trigger policy.
pub fn advance(state: &mut ScoreState, score: &Score, timestamp: u64) -> ScoreAction {
    let current = state.current_section;
    match score.sections[current].on_trigger {
        OnTrigger::Advance => match next_section(score, current) {
            // Single-section wrapping scores re-enter section 0.
            Some(to) => {
                state.current_section = to;
                state.section_entered_at = Some(timestamp);
                ScoreAction::Advanced { from: current, to }
            }
            None => ScoreAction::Clamped,
        },
        OnTrigger::Resample => ScoreAction::Resample,
        OnTrigger::Hold => ScoreAction::Hold,
    }
}

/// Moves on when the current section has outlived its `duration_limit`,
/// regardless of its trigger policy.
pub fn check_duration(state: &mut ScoreState, score: &Score, now: u64) -> Option<ScoreAction> {
    let section = &score.sections[state.current_section];
    let limit = section.duration_limit?;
    let entered = *state.section_entered_at.get_or_insert(now);
    if (now.saturating_sub(entered) as f64) < limit * 1e6 {
        return None;
    }
    let from = state.current_section;
    let to = next_section(score, from)?;
    state.current_section = to;
    state.section_entered_at = Some(now);
    Some(ScoreAction::Advanced { from, to })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::SoaSource;

    fn soa(s: f64) -> SaliencySample {
        SaliencySample {
            s,
            source: SoaSource::QomVariance,
            timestamp: 0,
        }
    }

    fn single(kind: DistKind, policy: SpreadPolicy) -> Score {
        Score {
            seed: 42,
            s_ref: 0.01,
            wrap: false,
            ramp_ms: 0.0,
            sections: vec![Section {
                id: Some(0),
                on_trigger: OnTrigger::Advance,
                duration_limit: None,
                distributions: vec![ParamDistribution {
                    kind,
                    target: "g.level".parse().unwrap(),
                    spread_policy: policy,
                }],
            }],
        }
    }

    const MINIMAL: &str = r#"{"seed": 1, "s_ref": 0.5, "sections": [{"on_trigger": "HOLD",
        "distributions": [{"kind": "UNIFORM", "params": {"lo": 0.1, "hi": 0.4}, "target": "gain.level"}]}]}"#;

    #[test]
    fn minimal_document() {
        let score = parse_score(MINIMAL, None).unwrap();
        assert!(!score.wrap);
        assert_eq!(score.sections.len(), 1);
        assert_eq!(score.sections[0].distributions[0].spread_policy, SpreadPolicy::Fixed);
        assert_eq!(score.ramp_ms, DEFAULT_SCORE_RAMP_MS);
    }

    #[test]
    fn inverted_range_names_the_field() {
        let doc = MINIMAL.replace(r#""lo": 0.1, "hi": 0.4"#, r#""lo": 0.9, "hi": 0.1"#);
        let errs = parse_score(&doc, None).unwrap_err();
        assert_eq!(errs.0.len(), 1);
        assert_eq!(errs.0[0].kind, ValidationKind::Range);
        assert_eq!(errs.0[0].location, "sections[0].distributions[0].params.lo");
    }

    #[test]
    fn structural_and_syntax_errors() {
        let errs = parse_score(r#"{"seed": 1, "s_ref": 0.5, "sections": []}"#, None).unwrap_err();
        assert!(errs.has_kind(ValidationKind::Structure));
        let errs = parse_score("{\n  \"seed\": 1,\n  \"s_ref\": oops}", None).unwrap_err();
        assert_eq!(errs.0[0].kind, ValidationKind::Syntax);
        assert!(errs.0[0].location.starts_with("line 3"));
    }

    #[test]
    fn unresolved_target_against_chain() {
        let chain = ChainSpec::parse(r#"{"sample_rate": 48000, "block_size": 256, "units": [{"id": "gain", "kind": "GAIN"}]}"#).unwrap();
        assert!(parse_score(MINIMAL, Some(&chain)).is_ok());
        let doc = MINIMAL.replace("gain.level", "delay9.mix");
        let errs = parse_score(&doc, Some(&chain)).unwrap_err();
        assert!(errs.has_kind(ValidationKind::UnresolvedTarget));
        assert!(errs.to_string().contains("delay9.mix"));
    }

    #[test]
    fn degenerate_uniform_is_exact() {
        let score = single(DistKind::Uniform { lo: 0.7, hi: 0.7 }, SpreadPolicy::ShrinkWithLowSoa);
        for seed in 0..20 {
            let mut st = ScoreState::new(&Score { seed, ..score.clone() });
            for s in [0.0, 0.005, 1.0] {
                assert_eq!(sample_section(&score.sections[0], &soa(s), &score, &mut st)[0].1, 0.7);
            }
        }
    }

    #[test]
    fn zero_saliency_collapses_gaussian() {
        let score = single(DistKind::Gaussian { mu: 0.5, sigma_base: 0.2 }, SpreadPolicy::ShrinkWithLowSoa);
        let mut st = ScoreState::new(&score);
        for _ in 0..50 {
            assert_eq!(sample_section(&score.sections[0], &soa(0.0), &score, &mut st)[0].1, 0.5);
        }
    }

    #[test]
    fn identical_state_identical_draws() {
        let score = single(DistKind::Uniform { lo: 0.0, hi: 1.0 }, SpreadPolicy::Fixed);
        let mut a = ScoreState::new(&score);
        let mut b = a.clone();
        let x = sample_section(&score.sections[0], &soa(0.3), &score, &mut a);
        let y = sample_section(&score.sections[0], &soa(0.3), &score, &mut b);
        assert_eq!(x, y);
        assert_eq!(a.rng_position(), b.rng_position());
        assert_ne!(sample_section(&score.sections[0], &soa(0.3), &score, &mut a), x);
    }

    #[test]
    fn choice_picks_only_weighted_values() {
        let score = single(
            DistKind::Choice {
                values: vec![0.1, 0.9, 0.5],
                weights: vec![1.0, 0.0, 3.0],
            },
            SpreadPolicy::ShrinkWithLowSoa,
        );
        let mut st = ScoreState::new(&score);
        for _ in 0..200 {
            let v = sample_section(&score.sections[0], &soa(0.0), &score, &mut st)[0].1;
            assert!(v == 0.1 || v == 0.5);
        }
    }

    fn three_sections(wrap: bool) -> Score {
        let mut score = single(DistKind::Uniform { lo: 0.0, hi: 1.0 }, SpreadPolicy::Fixed);
        let s = score.sections[0].clone();
        score.sections = vec![s.clone(), s.clone(), s];
        score.wrap = wrap;
        score
    }

    #[test]
    fn advance_wraps_or_clamps() {
        let score = three_sections(true);
        let mut st = ScoreState::new(&score);
        assert_eq!(advance(&mut st, &score, 1), ScoreAction::Advanced { from: 0, to: 1 });
        assert_eq!(st.current_section, 1);
        st.current_section = 2;
        assert_eq!(advance(&mut st, &score, 2), ScoreAction::Advanced { from: 2, to: 0 });

        let score = three_sections(false);
        let mut st = ScoreState::new(&score);
        st.current_section = 2;
        assert_eq!(advance(&mut st, &score, 3), ScoreAction::Clamped);
        assert_eq!(st.current_section, 2);
    }

    #[test]
    fn resample_and_hold_keep_section() {
        let mut score = three_sections(false);
        score.sections[0].on_trigger = OnTrigger::Resample;
        let mut st = ScoreState::new(&score);
        assert_eq!(advance(&mut st, &score, 0), ScoreAction::Resample);
        score.sections[0].on_trigger = OnTrigger::Hold;
        assert_eq!(advance(&mut st, &score, 0), ScoreAction::Hold);
        assert_eq!(st.current_section, 0);
    }

    #[test]
    fn duration_limit_moves_on() {
        let mut score = three_sections(false);
        score.sections[0].duration_limit = Some(2.0);
        let mut st = ScoreState::new(&score);
        assert_eq!(check_duration(&mut st, &score, 1_000_000), None);
        assert_eq!(check_duration(&mut st, &score, 2_999_999), None);
        assert_eq!(
            check_duration(&mut st, &score, 3_000_000),
            Some(ScoreAction::Advanced { from: 0, to: 1 })
        );
        // Section 1 has no limit.
        assert_eq!(check_duration(&mut st, &score, 60_000_000), None);
    }
}
